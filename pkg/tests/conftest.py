import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from dapi2ck.phantom import ArtifactConfig, ArtifactKindConfig, PhantomSpec, build_phantom_dataset

torch.set_num_threads(1)


def artifact_config(p_unspecific=1.0, p_loss=1.0, p_necrotic=0.0, p_dapi=0.0, radius=(25, 40)):
    return ArtifactConfig(
        unspecific_ck=ArtifactKindConfig(p_unspecific, 1, radius),
        ck_expression_loss=ArtifactKindConfig(p_loss, 1, radius),
        necrotic_ck=ArtifactKindConfig(p_necrotic, 1, radius),
        dapi_artifact=ArtifactKindConfig(p_dapi, 1, radius),
    )


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    """Twelve 256x256 phantoms, 8 train / 2 val / 2 test, artifact-free."""
    out = tmp_path_factory.mktemp("tiny_ds")
    spec = PhantomSpec(width=256, height=256, seed=5)
    return build_phantom_dataset(spec, 12, out, split=(0.7, 0.15, 0.15))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# end-to-end experiment shared by the acceptance suite and slow module tests

ACCEPTANCE_CONFIG = {
    "seed": 11,
    "phantom": {
        "artifact_config": {
            "unspecific_ck": {"probability": 1.0},
            "ck_expression_loss": {"probability": 1.0},
            "necrotic_ck": {"probability": 0.3},
            "dapi_artifact": {"probability": 0.3},
        },
    },
    "dataset": {"n_samples": 160},
}


def cli(*argv):
    from dapi2ck.cli import main
    code = main([str(a) for a in argv])
    if code != 0:
        raise RuntimeError(f"dapi2ck {' '.join(map(str, argv))} exited with {code}")


@dataclass
class AcceptanceRun:
    root: Path
    config: Path
    timings: dict = field(default_factory=dict)
    baseline_mae: float = float("nan")

    @property
    def manifest(self):
        return self.root / "phantoms"

    @property
    def clean_manifest(self):
        return self.root / "clean_phantoms"

    @property
    def dapi2ck(self):
        return self.root / "dapi2ck" / "checkpoint.pt"

    @property
    def seg(self):
        return self.root / "segmentation" / "checkpoint.pt"

    def infer_dir(self, name):
        return self.root / "infer" / name

    def report(self, evaluation, name):
        return json.loads((self.root / "evaluate" / evaluation / f"{name}.json").read_text())


def _timed(run, key, fn, *args):
    t = time.perf_counter()
    fn(*args)
    run.timings[key] = time.perf_counter() - t


def _infer(run, name, manifest, source, split=None):
    args = ["infer", "--config", run.config, "--manifest", manifest, "--source", source,
            "--seg", run.seg, "--out", run.infer_dir(name)]
    if split:
        args += ["--split", split]
    if source == "dapi":
        args += ["--dapi2ck", run.dapi2ck]
    cli(*args)


@pytest.fixture(scope="session")
def acceptance_run(tmp_path_factory):
    """Generate -> train both networks -> infer three ways -> evaluate, through the CLI."""
    from dapi2ck.data import load_patches
    from dapi2ck.phantom import Manifest
    from dapi2ck.translation import build_models, mean_abs_error
    from dapi2ck.config import load_config

    root = tmp_path_factory.mktemp("acceptance")
    cfg_path = root / "experiment.yaml"
    cfg_path.write_text(yaml.safe_dump({**ACCEPTANCE_CONFIG, "out_dir": str(root)}))
    run = AcceptanceRun(root, cfg_path)

    _timed(run, "generate", cli, "generate-phantoms", "--config", cfg_path)

    # untrained baseline, measured before any training
    cfg = load_config(cfg_path)
    g0, _ = build_models(cfg.translation.generator, cfg.translation.discriminator,
                         cfg.translation.train.seed)
    held_out = load_patches(Manifest.read(run.manifest), "test",
                            cfg.translation.train.patches_per_sample)
    run.baseline_mae = mean_abs_error(g0, held_out["dapi"], held_out["ck_stained"])

    _timed(run, "train_dapi2ck", cli, "train", "dapi2ck", "--config", cfg_path)
    _timed(run, "train_segmentation", cli, "train", "segmentation", "--config", cfg_path,
           "--channel", "ck_true")

    t = time.perf_counter()
    _infer(run, "synthetic", run.manifest, "dapi", "test")
    _infer(run, "stained", run.manifest, "ck_stained", "test")
    _infer(run, "true", run.manifest, "ck_true", "test")
    cli("evaluate", "--config", cfg_path, "--mode", "table", "--manifest", run.manifest,
        "--split", "test", "--synthetic", run.infer_dir("synthetic"),
        "--stained", run.infer_dir("stained"), "--out", root / "evaluate" / "test")
    cli("evaluate", "--config", cfg_path, "--mode", "vs_annotations", "--label", "stained",
        "--manifest", run.manifest, "--split", "test", "--pred", run.infer_dir("true"),
        "--out", root / "evaluate" / "true")

    # artifact-free held-out phantoms from a different seed
    cli("generate-phantoms", "--config", cfg_path, "--seed", 12, "--n", 16,
        "--set", "phantom.artifact_config={}", "--out", run.clean_manifest)
    _infer(run, "clean_synthetic", run.clean_manifest, "dapi")
    _infer(run, "clean_stained", run.clean_manifest, "ck_stained")
    cli("evaluate", "--config", cfg_path, "--mode", "synthetic_vs_stained",
        "--pred", run.infer_dir("clean_synthetic"), "--ref", run.infer_dir("clean_stained"),
        "--out", root / "evaluate" / "clean")
    run.timings["infer_evaluate"] = time.perf_counter() - t
    return run


@pytest.fixture(scope="session")
def trained_models(acceptance_run):
    from dapi2ck.checkpoint import Checkpoint
    return Checkpoint.load(acceptance_run.dapi2ck), Checkpoint.load(acceptance_run.seg)


# ---------------------------------------------------------------------------
# one summary line per acceptance criterion

_ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = "PASS" if report.passed else "FAIL"
        detail = dict(report.user_properties).get("measured", "")
        _ACCEPTANCE_LINES[number] = (f"criterion {number}: {status}  {title}"
                                     + (f"  [{detail}]" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(_ACCEPTANCE_LINES[k])
