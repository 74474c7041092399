"""Acceptance suite: one test per criterion, each summarized as a PASS/FAIL line.

Criteria 4-7 and 9 share one end-to-end experiment (``acceptance_run`` in
conftest): 160 phantoms of 512x512 (128 train / 16 val / 16 test, every test
slide carrying an unspecific-CK blob and an expression-loss region), both
networks trained with default configs, inference and evaluation through the CLI.
"""
import json
import math
import time

import numpy as np
import pytest
import torch
import yaml

from conftest import cli
from dapi2ck.checkpoint import Checkpoint
from dapi2ck.data import load_patches
from dapi2ck.evaluation import ConfusionCounts, confusion, metrics
from dapi2ck.phantom import Manifest
from dapi2ck.raster import read_mask
from dapi2ck.tiling import plan_tiles, stitch
from dapi2ck.translation import load_generator, mean_abs_error
from test_evaluation import brute_confusion
from test_translation import _analytic, _batch, _fd_oracle, _pick, _rel_err, _tiny


def _brute_metrics(tp, fp, fn):
    prec = tp / (tp + fp) if tp + fp else None
    sens = tp / (tp + fn) if tp + fn else None
    f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else None
    return prec, sens, f1


@pytest.mark.criterion(1, "metric oracle equivalence (100 random 32x32 pairs, < 10 s)")
def test_criterion_1_metric_oracle(record_property):
    t = time.perf_counter()
    rng = np.random.default_rng(2024)
    undefined_seen = 0
    for i in range(100):
        # every tenth pair is empty on both sides, exercising undefined denominators
        dp, dr = (0.0, 0.0) if i % 10 == 0 else rng.uniform(0, 1, 2)
        pred = rng.random((32, 32)) < dp
        ref = rng.random((32, 32)) < dr
        tp, fp, fn, tn = brute_confusion(pred, ref)
        counts = confusion(pred, ref)
        assert (counts.tp, counts.fp, counts.fn, counts.tn) == (tp, fp, fn, tn)
        report = metrics(counts)
        expected = _brute_metrics(tp, fp, fn)
        assert (report.precision, report.sensitivity, report.f1) == expected
        for name, value in zip(("precision", "sensitivity", "f1"), expected):
            assert (value is None) == (name in report.undefined)
        undefined_seen += bool(report.undefined)
    elapsed = time.perf_counter() - t
    record_property("measured", f"{elapsed:.2f} s, {undefined_seen} pairs with undefined metrics")
    assert undefined_seen >= 10
    assert elapsed < 10


@pytest.mark.criterion(2, "tiling/stitching invariants (50 random plans, < 30 s)")
def test_criterion_2_tiling(record_property):
    t = time.perf_counter()
    rng = np.random.default_rng(77)
    for _ in range(50):
        w, h = (int(v) for v in rng.integers(256, 720, 2))
        stride = int(rng.integers(16, 257))
        plan = plan_tiles(w, h, stride=stride)
        covered = np.zeros((h, w), np.int32)
        for x, y in plan.tiles:
            assert 0 <= x <= w - 256 and 0 <= y <= h - 256
            covered[y:y + 256, x:x + 256] += 1
        assert covered.min() >= 1
        for extent, axis in ((w, 0), (h, 1)):
            n = math.ceil((extent - 256) / stride) + 1
            expected = [min(i * stride, extent - 256) for i in range(n)]
            assert sorted({c[axis] for c in plan.tiles}) == expected
    worst_const = worst_order = 0.0
    for blend in ("uniform_average", "cosine_ramp"):
        for _ in range(3):
            w, h = (int(v) for v in rng.integers(300, 700, 2))
            plan = plan_tiles(w, h, stride=int(rng.integers(32, 200)), blend=blend)
            c = np.float32(rng.uniform(-1, 1))
            out = stitch([(xy, np.full((256, 256), c, np.float32)) for xy in plan.tiles], plan)
            worst_const = max(worst_const, float(np.abs(out - c).max()))
            tiles = [(xy, rng.standard_normal((256, 256)).astype(np.float32))
                     for xy in plan.tiles]
            a = stitch(tiles, plan)
            b = stitch([tiles[i] for i in rng.permutation(len(tiles))], plan)
            worst_order = max(worst_order, float(np.abs(a - b).max()))
    elapsed = time.perf_counter() - t
    record_property("measured", f"const dev {worst_const:.1e}, order dev {worst_order:.1e}, "
                                f"{elapsed:.1f} s")
    assert worst_const <= 1e-6 and worst_order <= 1e-6
    assert elapsed < 30


@pytest.mark.criterion(3, "GAN gradient check vs central differences (20 params x 5 configs)")
def test_criterion_3_gradients(record_property):
    t = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = 0.0
    for k in range(5):
        size = int(rng.choice([8, 16]))
        g_depth = int(rng.integers(1, 4))
        d_layers = 1 if size == 8 else int(rng.integers(1, 3))
        cfg = (size, g_depth, int(rng.integers(2, 5)), d_layers, int(rng.integers(2, 5)),
               float(rng.choice([0.0, 1.0, 10.0, 100.0])), 100 + k)
        x, y = _batch(rng, n=2, size=size)
        g, d = _tiny(*cfg[:5], cfg[-1], torch.float64)
        picks = _pick(list(g.parameters()) + list(d.parameters()), rng)
        fd = _fd_oracle(cfg, picks, "g", x, y)
        analytic = _analytic(cfg, picks, "g", x, y, torch.float32)
        worst = max([worst] + [_rel_err(a, n) for a, n in zip(analytic, fd)])
    elapsed = time.perf_counter() - t
    record_property("measured", f"max rel err {worst:.1e} (float32), {elapsed:.1f} s")
    assert worst <= 1e-3
    assert elapsed < 120


@pytest.mark.slow
@pytest.mark.criterion(4, "dapi2ck held-out MAE <= 0.5 x untrained (>= 500 pairs, <= 30 min)")
def test_criterion_4_dapi2ck_learning(acceptance_run, record_property):
    m = Manifest.read(acceptance_run.manifest)
    ck = Checkpoint.load(acceptance_run.dapi2ck)
    ppp = ck.configs["train"]["patches_per_sample"]
    n_pairs = len(m.split("train")) * ppp
    held_out = load_patches(m, "test", ppp)
    trained = mean_abs_error(load_generator(ck), held_out["dapi"], held_out["ck_stained"])
    ratio = trained / acceptance_run.baseline_mae
    minutes = acceptance_run.timings["train_dapi2ck"] / 60
    record_property("measured", f"MAE {trained:.4f} vs untrained {acceptance_run.baseline_mae:.4f}"
                                f" (ratio {ratio:.3f}), {n_pairs} pairs, {minutes:.1f} min")
    assert n_pairs >= 500
    assert ratio <= 0.5
    assert minutes <= 30


@pytest.mark.slow
@pytest.mark.criterion(5, "two-step pooled F1 >= 0.80 vs phantom masks")
def test_criterion_5_two_step_quality(acceptance_run, record_property):
    pooled = acceptance_run.report("test", "synthetic_vs_annotations")["pooled"]
    record_property("measured", f"F1 {pooled['f1']:.4f}, precision {pooled['precision']:.4f}, "
                                f"sensitivity {pooled['sensitivity']:.4f}")
    assert pooled["f1"] >= 0.80


@pytest.mark.slow
@pytest.mark.criterion(6, "evaluate emits the three table rows; clean synthetic-vs-stained F1 >= 0.85")
def test_criterion_6_table_structure(acceptance_run, record_property):
    table = (acceptance_run.root / "evaluate" / "test" / "table.txt").read_text().splitlines()
    labels = [line.split("  ")[0] for line in table[1:]]
    assert labels == ["stained CK vs. annotations", "synthetic CK vs. annotations",
                      "synthetic CK vs. stained CK"]
    for name in ("stained_vs_annotations", "synthetic_vs_annotations", "synthetic_vs_stained"):
        assert acceptance_run.report("test", name)["pooled"]["f1"] is not None
    clean = acceptance_run.report("clean", "synthetic_vs_stained")["pooled"]
    record_property("measured", f"clean synthetic-vs-stained F1 {clean['f1']:.4f}")
    assert clean["f1"] >= 0.85


@pytest.mark.slow
@pytest.mark.criterion(7, "artifact regions: fewer FP (unspecific) and FN (expression loss) on synthetic")
def test_criterion_7_artifact_directions(acceptance_run, record_property):
    m = Manifest.read(acceptance_run.manifest)
    zero = ConfusionCounts(0, 0, 0, 0)
    pooled = {key: zero for key in ("un_syn", "un_st", "el_syn", "el_st")}
    n_regions = {"unspecific_ck": 0, "ck_expression_loss": 0}
    for entry in m.split("test"):
        sample = m.load(entry)
        synth = read_mask(acceptance_run.infer_dir("synthetic") / entry["id"] / "mask.png")
        stained = read_mask(acceptance_run.infer_dir("stained") / entry["id"] / "mask.png")
        ref = sample.epithelium_mask
        for art in sample.artifacts:
            tag = {"unspecific_ck": "un", "ck_expression_loss": "el"}.get(art.kind)
            if tag is None:
                continue
            n_regions[art.kind] += 1
            pooled[f"{tag}_syn"] += confusion(synth, ref, art.region_mask)
            pooled[f"{tag}_st"] += confusion(stained, ref, art.region_mask)
    record_property("measured",
                    f"unspecific FP synthetic {pooled['un_syn'].fp} vs stained "
                    f"{pooled['un_st'].fp} ({n_regions['unspecific_ck']} regions); "
                    f"expression-loss FN synthetic {pooled['el_syn'].fn} vs stained "
                    f"{pooled['el_st'].fn} ({n_regions['ck_expression_loss']} regions)")
    assert min(n_regions.values()) >= 10
    assert pooled["un_syn"].fp < pooled["un_st"].fp
    assert pooled["el_syn"].fn < pooled["el_st"].fn


# reduced end-to-end configuration for the repeat-run check
REPRO_CONFIG = {
    "seed": 3,
    "phantom": {"width": 256, "height": 256,
                "artifact_config": {"unspecific_ck": {"probability": 1.0}}},
    "dataset": {"n_samples": 10},
    "translation": {
        "generator": {"base_width": 4, "max_width": 16},
        "discriminator": {"base_width": 4},
        "train": {"epochs": 1, "patches_per_sample": 1, "batch_size": 4},
    },
    "segmentation": {"config": {"base_width": 4, "epochs": 1, "patches_per_sample": 1,
                                "batch_size": 4}},
}


def _end_to_end(root):
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "experiment.yaml"
    cfg.write_text(yaml.safe_dump({**REPRO_CONFIG, "out_dir": str(root)}))
    cli("generate-phantoms", "--config", cfg)
    cli("train", "dapi2ck", "--config", cfg)
    cli("train", "segmentation", "--config", cfg)
    common = ["--config", cfg, "--manifest", root / "phantoms", "--split", "test",
              "--seg", root / "segmentation" / "checkpoint.pt"]
    cli("infer", *common, "--dapi2ck", root / "dapi2ck" / "checkpoint.pt",
        "--out", root / "infer" / "synthetic")
    cli("infer", *common, "--source", "ck_stained", "--out", root / "infer" / "stained")
    cli("evaluate", "--config", cfg, "--mode", "table", "--manifest", root / "phantoms",
        "--split", "test", "--synthetic", root / "infer" / "synthetic",
        "--stained", root / "infer" / "stained")


def _max_numeric_diff(a, b, path="$"):
    if isinstance(a, dict):
        assert a.keys() == b.keys(), path
        return max([0.0] + [_max_numeric_diff(a[k], b[k], f"{path}.{k}") for k in a])
    if isinstance(a, list):
        assert len(a) == len(b), path
        return max([0.0] + [_max_numeric_diff(x, y, path) for x, y in zip(a, b)])
    if isinstance(a, float) or isinstance(b, float):
        return abs(float(a) - float(b))
    assert a == b, path
    return 0.0


@pytest.mark.slow
@pytest.mark.criterion(8, "two identical end-to-end runs: same manifests, masks, metrics")
def test_criterion_8_reproducibility(tmp_path, record_property):
    a, b = tmp_path / "a", tmp_path / "b"
    _end_to_end(a)
    _end_to_end(b)
    assert (a / "phantoms" / "manifest.json").read_bytes() == \
        (b / "phantoms" / "manifest.json").read_bytes()
    masks = sorted(p.relative_to(a) for p in (a / "infer").glob("*/*/mask.png"))
    assert masks
    for rel in masks:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    worst = 0.0
    reports = sorted(p.relative_to(a) for p in (a / "evaluate").glob("*.json"))
    assert len(reports) == 3
    for rel in reports:
        worst = max(worst, _max_numeric_diff(json.loads((a / rel).read_text()),
                                             json.loads((b / rel).read_text())))
    record_property("measured", f"{len(masks)} masks identical, max metric diff {worst:.1e}")
    assert worst <= 1e-6


@pytest.mark.slow
@pytest.mark.criterion(9, "segmentation on clean CK (no GAN): F1 >= 0.85")
def test_criterion_9_clean_ck_segmentation(acceptance_run, record_property):
    pooled = acceptance_run.report("true", "vs_annotations")["pooled"]
    record_property("measured", f"F1 {pooled['f1']:.4f}")
    assert pooled["f1"] >= 0.85
