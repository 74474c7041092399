import json
from pathlib import Path

import numpy as np
import pytest
import yaml
from PIL import Image

from dapi2ck.cli import main, mask_boundary
from dapi2ck.phantom import Manifest
from dapi2ck.raster import read_mask, write_mask, write_uint16

TINY = {
    "seed": 4,
    "phantom": {"width": 256, "height": 256},
    "dataset": {"n_samples": 10},
    "translation": {
        "generator": {"base_width": 4, "max_width": 16},
        "discriminator": {"base_width": 4},
        "train": {"epochs": 1, "patches_per_sample": 1, "batch_size": 4},
    },
    "segmentation": {"config": {"base_width": 4, "epochs": 1, "patches_per_sample": 1,
                                "batch_size": 4}},
}


def write_config(root: Path, **extra) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    path = root / "exp.yaml"
    path.write_text(yaml.safe_dump({**TINY, "out_dir": str(root), **extra}))
    return path


def run(*argv):
    return main([str(a) for a in argv])


def last_error(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root)
    assert run("generate-phantoms", "--config", cfg) == 0
    assert run("train", "dapi2ck", "--config", cfg) == 0
    assert run("train", "segmentation", "--config", cfg) == 0
    return root, cfg


def test_generate_phantoms(experiment):
    root, _ = experiment
    m = Manifest.read(root / "phantoms")
    assert len(m.samples) == 10
    snap = yaml.safe_load((root / "phantoms" / "config.yaml").read_text())
    assert snap["seed"] == 4 and snap["phantom"]["width"] == 256


def test_generate_rerun_identical(experiment, tmp_path):
    root, cfg = experiment
    assert run("generate-phantoms", "--config", cfg, "--out", tmp_path / "again") == 0
    assert (tmp_path / "again" / "manifest.json").read_bytes() == \
        (root / "phantoms" / "manifest.json").read_bytes()


def test_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    cfg = write_config(tmp_path / "c")
    assert run("generate-phantoms", "--config", cfg, "--out", blocker / "x") == 2
    assert "blocker" in last_error(capsys)["path"]


def test_bad_config(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("phantom: {widht: 3}\n")
    assert run("generate-phantoms", "--config", cfg) == 2
    assert "widht" in last_error(capsys)["message"]
    assert run("generate-phantoms", "--config", tmp_path / "missing.yaml") == 2
    assert run("generate-phantoms", "--set", "phantom.epithelial_fraction=2") == 2
    assert last_error(capsys)["field"] == "epithelial_fraction"


def test_unknown_command_is_config_error():
    assert run("fly") == 2


def test_train_outputs(experiment):
    root, _ = experiment
    for name in ("dapi2ck", "segmentation"):
        assert (root / name / "checkpoint.pt").exists()
        assert len((root / name / "train_log.jsonl").read_text().splitlines()) == 1
        assert (root / name / "config.yaml").exists()


def test_synthetic_selector_without_checkpoint(experiment, tmp_path, capsys):
    _, cfg = experiment
    code = run("train", "segmentation", "--config", cfg, "--channel",
               "synthetic_from_checkpoint", "--out", tmp_path / "s")
    assert code == 2
    assert last_error(capsys)["field"] == "dapi2ck_checkpoint"


def test_resume_continues_numbering(experiment, tmp_path):
    root, cfg = experiment
    out = tmp_path / "g"
    assert run("train", "dapi2ck", "--config", cfg, "--out", out) == 0
    assert run("train", "dapi2ck", "--config", cfg, "--out", out, "--epochs", "2",
               "--resume", out / "checkpoint.pt") == 0
    epochs = [json.loads(l)["epoch"] for l in (out / "train_log.jsonl").read_text().splitlines()]
    assert epochs == [1, 2]


def test_corrupt_checkpoint_rejected(experiment, tmp_path, capsys):
    root, cfg = experiment
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"not a checkpoint")
    code = run("infer", "--config", cfg, "--manifest", root / "phantoms", "--split", "test",
               "--source", "ck_stained", "--seg", bad, "--out", tmp_path / "o")
    assert code == 2
    assert last_error(capsys)["path"] == str(bad)


def test_divergence_exit_code_and_preserved_checkpoint(experiment, tmp_path, capsys,
                                                       monkeypatch):
    from dapi2ck import translation
    real = translation.gan_step_losses
    calls = {"n": 0}

    def poisoned(x, y, g, d, lam, check_finite=True):
        calls["n"] += 1
        if calls["n"] > 2:  # 8 train pairs, batch 4: the second epoch diverges
            y = y * float("nan")
        return real(x, y, g, d, lam, check_finite)

    monkeypatch.setattr(translation, "gan_step_losses", poisoned)
    _, cfg = experiment
    out = tmp_path / "g"
    assert run("train", "dapi2ck", "--config", cfg, "--out", out, "--epochs", "3") == 3
    err = last_error(capsys)
    assert err["component"] == "l1" and err["epoch"] == 2
    from dapi2ck.checkpoint import Checkpoint
    assert len(Checkpoint.load(out / "checkpoint.pt").training_log) == 1


@pytest.fixture(scope="module")
def slide_file(experiment):
    root, _ = experiment
    m = Manifest.read(root / "phantoms")
    sample = m.load(m.samples[0])
    path = root / "slides" / "slide_a.tif"
    write_uint16(path, sample.dapi.channel(), 0.5, ["DAPI"])
    return path


def _infer(experiment, slide, out):
    root, cfg = experiment
    return run("infer", "--config", cfg, "--input", slide,
               "--dapi2ck", root / "dapi2ck" / "checkpoint.pt",
               "--seg", root / "segmentation" / "checkpoint.pt", "--out", out)


def test_infer_single_slide(experiment, slide_file, tmp_path):
    assert _infer(experiment, slide_file, tmp_path / "a") == 0
    sdir = tmp_path / "a" / "slide_a"
    assert {p.name for p in sdir.iterdir()} == {"synthetic_ck.tif", "probability.png",
                                                 "mask.png", "infer.json"}
    side = json.loads((sdir / "infer.json").read_text())
    assert (side["height"], side["width"], side["stride"]) == (256, 256, 128)
    assert set(side["checkpoints"]) == {"dapi2ck", "segmentation"}
    assert (tmp_path / "a" / "config.yaml").exists()
    assert not list(sdir.glob(".*"))  # no leftover temp files


def test_infer_twice_bit_identical(experiment, slide_file, tmp_path):
    assert _infer(experiment, slide_file, tmp_path / "a") == 0
    assert _infer(experiment, slide_file, tmp_path / "b") == 0
    a = (tmp_path / "a" / "slide_a" / "mask.png").read_bytes()
    assert a == (tmp_path / "b" / "slide_a" / "mask.png").read_bytes()


def test_infer_missing_checkpoint(experiment, slide_file, tmp_path, capsys):
    root, cfg = experiment
    code = run("infer", "--config", cfg, "--input", slide_file,
               "--dapi2ck", tmp_path / "nope.pt",
               "--seg", root / "segmentation" / "checkpoint.pt", "--out", tmp_path / "o")
    assert code == 2
    assert "nope.pt" in last_error(capsys)["path"]


def test_infer_stride_flag(experiment, slide_file, tmp_path):
    root, cfg = experiment
    code = run("infer", "--config", cfg, "--input", slide_file, "--stride", "64",
               "--dapi2ck", root / "dapi2ck" / "checkpoint.pt",
               "--seg", root / "segmentation" / "checkpoint.pt", "--out", tmp_path / "o")
    assert code == 0
    assert json.loads((tmp_path / "o" / "slide_a" / "infer.json").read_text())["stride"] == 64


def _mask_dir(root, masks):
    for sid, m in masks.items():
        write_mask(root / sid / "mask.png", m)
    return root


def test_evaluate_identical(tmp_path, capsys):
    rng = np.random.default_rng(0)
    masks = {f"s{i}": rng.random((20, 20)) < 0.5 for i in range(3)}
    d = _mask_dir(tmp_path / "p", masks)
    code = run("evaluate", "--mode", "synthetic_vs_stained", "--pred", d, "--ref", d,
               "--out", tmp_path / "e")
    assert code == 0
    rep = json.loads((tmp_path / "e" / "synthetic_vs_stained.json").read_text())
    for r in [rep["pooled"], *rep["per_fov"].values()]:
        assert (r["f1"], r["precision"], r["sensitivity"]) == (1.0, 1.0, 1.0)
    assert "synthetic CK vs. stained CK" in (tmp_path / "e" / "table.txt").read_text()


def test_evaluate_mismatched_ids(tmp_path, capsys):
    a = _mask_dir(tmp_path / "a", {"s1": np.ones((4, 4), bool), "s2": np.ones((4, 4), bool)})
    b = _mask_dir(tmp_path / "b", {"s1": np.ones((4, 4), bool), "s3": np.ones((4, 4), bool)})
    code = run("evaluate", "--mode", "vs_annotations", "--pred", a, "--ref", b,
               "--out", tmp_path / "e")
    assert code == 2
    msg = last_error(capsys)["message"]
    assert "s2" in msg and "s3" in msg


def test_evaluate_table_has_three_rows(experiment, tmp_path):
    root, cfg = experiment
    common = ["--config", cfg, "--manifest", root / "phantoms", "--split", "test",
              "--seg", root / "segmentation" / "checkpoint.pt"]
    assert run("infer", *common, "--dapi2ck", root / "dapi2ck" / "checkpoint.pt",
               "--out", tmp_path / "syn") == 0
    assert run("infer", *common, "--source", "ck_stained", "--out", tmp_path / "st") == 0
    assert run("evaluate", "--config", cfg, "--mode", "table", "--manifest", root / "phantoms",
               "--split", "test", "--synthetic", tmp_path / "syn", "--stained", tmp_path / "st",
               "--out", tmp_path / "e") == 0
    rows = (tmp_path / "e" / "table.txt").read_text().splitlines()
    assert len(rows) == 4
    for name in ("stained_vs_annotations", "synthetic_vs_annotations", "synthetic_vs_stained"):
        rep = json.loads((tmp_path / "e" / f"{name}.json").read_text())
        assert rep["pooled"]["aggregation"] == "micro"


def _independent_boundary(mask):
    padded = np.pad(mask, 1, constant_values=False)
    inner = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~inner


def test_report_overlay_contours(tmp_path):
    run_dir = tmp_path / "run"
    mask = np.zeros((60, 80), bool)
    mask[10:40, 20:70] = True
    mask[45:60, 0:10] = True  # touches the raster border
    write_mask(run_dir / "slide_1" / "mask.png", mask)
    prob = (mask * 200).astype(np.uint8)
    Image.fromarray(prob).save(run_dir / "slide_1" / "probability.png")
    assert run("report", "--run", run_dir) == 0
    files = list((run_dir / "report").glob("overlay_*.png"))
    assert [f.name for f in files] == ["overlay_slide_1.png"]
    rgb = np.asarray(Image.open(files[0]))
    red = (rgb[..., 0] == 255) & (rgb[..., 1] == 0) & (rgb[..., 2] == 0)
    expected = _independent_boundary(read_mask(run_dir / "slide_1" / "mask.png"))
    assert np.array_equal(red, expected)
    assert np.array_equal(mask_boundary(mask), expected)


def test_report_with_difference_map(experiment, slide_file, tmp_path):
    root, cfg = experiment
    out = tmp_path / "infer"
    assert run("infer", "--config", cfg, "--manifest", root / "phantoms", "--split", "test",
               "--dapi2ck", root / "dapi2ck" / "checkpoint.pt",
               "--seg", root / "segmentation" / "checkpoint.pt", "--out", out) == 0
    assert run("report", "--run", out, "--manifest", root / "phantoms") == 0
    sid = Manifest.read(root / "phantoms").split("test")[0]["id"]
    assert (out / "report" / f"overlay_{sid}.png").exists()
    assert (out / "report" / f"difference_{sid}.png").exists()


def test_report_empty_run(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert run("report", "--run", tmp_path / "empty") != 0
