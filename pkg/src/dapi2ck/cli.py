"""Command-line entry point.

    dapi2ck generate-phantoms --config exp.yaml
    dapi2ck train dapi2ck --config exp.yaml
    dapi2ck train segmentation --config exp.yaml --channel ck_true
    dapi2ck infer --config exp.yaml --manifest runs/exp/phantoms --split test \
        --dapi2ck runs/exp/dapi2ck/checkpoint.pt --seg runs/exp/segmentation/checkpoint.pt
    dapi2ck evaluate --mode table --synthetic DIR --stained DIR --manifest M
    dapi2ck report --run DIR

Exit codes: 0 success, 2 config/validation error, 3 runtime/training error.
Errors are also printed to stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import evaluation as ev
from .checkpoint import Checkpoint
from .config import ExperimentConfig, dump_config, load_config
from .errors import ConfigError, RuntimeFailure
from .phantom import Manifest, build_phantom_dataset
from .pipeline import run_two_step, segment_ck
from .raster import (SlideRaster, read_mask, read_probability, read_slide, read_uint16,
                     write_mask, write_probability, write_rgb, write_text, write_uint16)
from .segmentation import train_segmentation
from .translation import train_dapi2ck

log = logging.getLogger("dapi2ck")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _snapshot(out: Path, config: ExperimentConfig, args: argparse.Namespace):
    def plain(v):
        if isinstance(v, Path):
            return str(v)
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        return v
    extra = {k: plain(v) for k, v in vars(args).items() if k != "func"}
    write_text(out / "config.yaml", dump_config(config, extra))


def _ensure_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory not writable: {path} ({exc})",
                          path=str(path)) from exc
    return path


def _config(args) -> ExperimentConfig:
    overrides = {"seed": args.seed, "out_dir": args.out_dir}
    if getattr(args, "stride", None) is not None:
        overrides["pipeline.stride"] = args.stride
    if getattr(args, "threshold", None) is not None:
        overrides["pipeline.threshold"] = args.threshold
    return load_config(args.config, overrides, args.set)


# ---------------------------------------------------------------------------
# commands


def cmd_generate_phantoms(args) -> int:
    cfg = _config(args)
    out = Path(args.out or Path(cfg.out_dir) / "phantoms")
    n = args.n if args.n is not None else cfg.dataset.n_samples
    _ensure_dir(out)
    manifest = build_phantom_dataset(cfg.phantom, n, out, tuple(cfg.dataset.split),
                                     cfg.dataset.workers)
    _snapshot(out, cfg, args)
    print(json.dumps({"manifest": str(manifest.path), "n_samples": len(manifest.samples)}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    manifest = Manifest.read(args.manifest or Path(cfg.out_dir) / "phantoms")
    if args.which == "dapi2ck":
        out = _ensure_dir(args.out or Path(cfg.out_dir) / "dapi2ck")
        tc = cfg.translation.train
        if args.epochs is not None:
            tc.epochs = args.epochs
        tc.checkpoint_path = str(out / "checkpoint.pt")
        tc.log_path = str(out / "train_log.jsonl")
        _snapshot(out, cfg, args)
        ckpt = train_dapi2ck(manifest, tc, cfg.translation.generator,
                             cfg.translation.discriminator, resume_from=args.resume)
    else:
        out = _ensure_dir(args.out or Path(cfg.out_dir) / "segmentation")
        sc = cfg.segmentation.config
        if args.epochs is not None:
            sc.epochs = args.epochs
        channel = args.channel or cfg.segmentation.channel_selector
        dapi2ck = args.dapi2ck_checkpoint or cfg.segmentation.dapi2ck_checkpoint
        if channel == "synthetic_from_checkpoint" and not dapi2ck:
            raise ConfigError("channel synthetic_from_checkpoint requires "
                              "segmentation.dapi2ck_checkpoint", field="dapi2ck_checkpoint")
        sc.checkpoint_path = str(out / "checkpoint.pt")
        sc.log_path = str(out / "train_log.jsonl")
        _snapshot(out, cfg, args)
        ckpt = train_segmentation(manifest, sc, channel, dapi2ck, resume_from=args.resume)
    print(json.dumps({"checkpoint": str(out / "checkpoint.pt"),
                      "epochs": len(ckpt.training_log),
                      "last": ckpt.training_log[-1] if ckpt.training_log else None}))
    return EXIT_OK


def _infer_inputs(args):
    """Yield (sample_id, input raster, artifact regions)."""
    if args.manifest:
        manifest = Manifest.read(args.manifest)
        entries = manifest.split(args.split) if args.split else manifest.samples
        if args.split and not entries:
            raise ConfigError(f"manifest split {args.split!r} is empty", field="split")
        for entry in entries:
            sample = manifest.load(entry)
            raster = sample.dapi if args.source == "dapi" else getattr(sample, args.source)
            regions = [(a.kind, a.region_mask) for a in sample.artifacts]
            yield entry["id"], raster, regions
    elif args.input:
        for path in args.input:
            raster = read_slide(path, resolution=args.resolution)
            if args.channel is not None:
                ch = int(args.channel) if str(args.channel).isdigit() else args.channel
                raster = SlideRaster.single(raster.channel(ch), raster.channels[0]
                                            if isinstance(ch, int) else ch, raster.resolution)
            yield Path(path).stem, raster, []
    else:
        raise ConfigError("infer needs --input or --manifest", field="input")


def cmd_infer(args) -> int:
    cfg = _config(args)
    p = cfg.pipeline
    out = _ensure_dir(args.out or Path(cfg.out_dir) / "infer")
    seg = Checkpoint.load(args.seg)
    gen = Checkpoint.load(args.dapi2ck) if args.source == "dapi" else None
    if args.source == "dapi" and args.dapi2ck is None:
        raise ConfigError("two-step inference needs --dapi2ck", field="dapi2ck")
    _snapshot(out, cfg, args)
    count = 0
    for sid, raster, regions in _infer_inputs(args):
        sdir = out / sid
        sidecar = {"id": sid, "source": args.source}
        if args.source == "dapi":
            res = run_two_step(raster, gen, seg, p.stride, p.blend, p.threshold, regions,
                               p.batch_size)
            write_uint16(sdir / "synthetic_ck.tif", res.synthetic_ck.channel(),
                         raster.resolution, ["CK_synthetic"])
            prob, mask = res.probability_map, res.epithelium_mask
            sidecar.update(res.report)
        else:
            prob, mask = segment_ck(raster, seg, p.stride, p.blend, p.threshold, p.batch_size)
            sidecar.update({"height": raster.height, "width": raster.width,
                            "resolution": raster.resolution, "tile_size": 256,
                            "stride": p.stride, "blend": p.blend,
                            "threshold": p.threshold if p.threshold is not None
                            else seg.configs["segmentation"]["threshold"],
                            "positive_fraction": float(mask.mean()),
                            "checkpoints": {"segmentation": seg.fingerprint()}})
        write_probability(sdir / "probability.png", prob)
        write_mask(sdir / "mask.png", mask)
        write_text(sdir / "infer.json", json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
        count += 1
    print(json.dumps({"out": str(out), "slides": count}))
    return EXIT_OK


def _mask_dir(path) -> dict[str, Path]:
    """Masks in ``<dir>/<id>/mask.png`` or ``<dir>/<id>.png`` layout."""
    path = Path(path)
    if not path.is_dir():
        raise ConfigError(f"not a directory: {path}", path=str(path))
    found = {p.parent.name: p for p in path.glob("*/mask.png")}
    for p in path.glob("*.png"):
        found.setdefault(p.stem, p)
    return found


def _load_masks(source, manifest=None, split=None) -> dict[str, np.ndarray]:
    if manifest is not None:
        m = Manifest.read(manifest)
        entries = m.split(split) if split else m.samples
        root = m.root
        return {e["id"]: read_mask(root / e["files"]["epithelium_mask"]) for e in entries}
    return {k: read_mask(v) for k, v in _mask_dir(source).items()}


def _restrict(preds: dict, refs: dict) -> dict:
    """Predictions limited to reference ids; a missing prediction is an error."""
    missing = sorted(set(refs) - set(preds))
    if missing:
        raise ConfigError(f"missing predictions for ids: {missing}", field="pred")
    return {k: preds[k] for k in refs}


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    out = _ensure_dir(args.out or Path(cfg.out_dir) / "evaluate")
    reports: dict[str, ev.EvaluationResult] = {}
    if args.mode == "vs_annotations":
        refs = _load_masks(args.ref, args.manifest, args.split)
        preds = _load_masks(args.pred)
        if args.manifest:
            preds = _restrict(preds, refs)
        reports["vs_annotations"] = ev.evaluate_against_annotations(preds, refs)
    elif args.mode == "synthetic_vs_stained":
        reports["synthetic_vs_stained"] = ev.compare_synthetic_vs_stained(
            _load_masks(args.pred), _load_masks(args.ref))
    else:
        if not (args.synthetic and args.stained and args.manifest):
            raise ConfigError("--mode table needs --synthetic, --stained and --manifest")
        refs = _load_masks(None, args.manifest, args.split)
        synth = _restrict(_load_masks(args.synthetic), refs)
        stained = _restrict(_load_masks(args.stained), refs)
        reports["stained_vs_annotations"] = ev.evaluate_against_annotations(stained, refs)
        reports["synthetic_vs_annotations"] = ev.evaluate_against_annotations(synth, refs)
        reports["synthetic_vs_stained"] = ev.compare_synthetic_vs_stained(synth, stained)
    _snapshot(out, cfg, args)
    for name, result in reports.items():
        write_text(out / f"{name}.json", json.dumps(result.to_dict(), indent=2) + "\n")
    rows = {k: v.pooled for k, v in reports.items()}
    if args.mode == "vs_annotations":
        rows = {("synthetic_vs_annotations" if args.label == "synthetic"
                 else "stained_vs_annotations"): reports["vs_annotations"].pooled}
    table = ev.render_table(rows)
    write_text(out / "table.txt", table)
    print(table, end="")
    return EXIT_OK


def mask_boundary(mask: np.ndarray) -> np.ndarray:
    """Positive pixels with at least one 4-connected negative (or out-of-raster) neighbour."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, border_value=0)


def _to_gray8(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    lo, hi = np.percentile(x, [1, 99.5])
    if hi <= lo:
        return np.zeros(x.shape, np.uint8)
    return np.round(np.clip((x - lo) / (hi - lo), 0, 1) * 255).astype(np.uint8)


def render_overlay(base: np.ndarray, mask: np.ndarray) -> np.ndarray:
    gray = _to_gray8(base)
    rgb = np.stack([gray] * 3, axis=-1)
    rgb[mask_boundary(mask)] = (255, 0, 0)
    return rgb


def render_difference(synthetic: np.ndarray, stained: np.ndarray) -> np.ndarray:
    from matplotlib import colormaps
    diff = synthetic.astype(np.float64) - stained.astype(np.float64)
    scale = max(np.abs(diff).max(), 1.0)
    rgba = colormaps["coolwarm"]((diff / scale + 1) / 2)
    return np.round(rgba[..., :3] * 255).astype(np.uint8)


def cmd_report(args) -> int:
    run = Path(args.run)
    slides = sorted(p.parent for p in run.glob("*/mask.png")) if run.is_dir() else []
    if not slides:
        raise ConfigError(f"no inference outputs (*/mask.png) under {run}", path=str(run))
    out = _ensure_dir(args.out or run / "report")
    stained = {}
    if args.manifest:
        m = Manifest.read(args.manifest)
        stained = {e["id"]: m.root / e["files"]["ck_stained"] for e in m.samples}
    written = []
    for sdir in slides:
        sid = sdir.name
        mask = read_mask(sdir / "mask.png")
        synth_path = sdir / "synthetic_ck.tif"
        base = read_uint16(synth_path)[0] if synth_path.exists() else \
            read_probability(sdir / "probability.png")
        write_rgb(out / f"overlay_{sid}.png", render_overlay(base, mask))
        written.append(f"overlay_{sid}.png")
        if synth_path.exists() and sid in stained:
            write_rgb(out / f"difference_{sid}.png",
                      render_difference(base, read_uint16(stained[sid])[0]))
            written.append(f"difference_{sid}.png")
    print(json.dumps({"out": str(out), "files": written}))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config")
    common.add_argument("--seed", type=int, help="master seed override")
    common.add_argument("--out-dir", help="experiment root (config out_dir)")
    common.add_argument("--out", type=Path, help="output directory for this command")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. translation.train.epochs=2")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dapi2ck", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-phantoms", parents=[common], help="build a phantom dataset")
    p.add_argument("--n", type=int, help="number of samples (dataset.n_samples)")
    p.set_defaults(func=cmd_generate_phantoms)

    p = sub.add_parser("train", parents=[common], help="train one of the two networks")
    p.add_argument("which", choices=["dapi2ck", "segmentation"])
    p.add_argument("--manifest", type=Path)
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", type=Path, help="continue from a checkpoint's last epoch")
    p.add_argument("--channel", choices=["ck_true", "ck_stained", "synthetic_from_checkpoint"])
    p.add_argument("--dapi2ck-checkpoint", type=Path)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="sliding-window inference")
    p.add_argument("--input", nargs="+", type=Path, help="slide image file(s)")
    p.add_argument("--channel", help="channel index or name within --input")
    p.add_argument("--resolution", type=float, help="micrometers per pixel")
    p.add_argument("--manifest", type=Path)
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--source", choices=["dapi", "ck_stained", "ck_true"], default="dapi",
                   help="dapi = two-step; ck_* = segment that CK channel directly")
    p.add_argument("--dapi2ck", type=Path)
    p.add_argument("--seg", type=Path, required=True)
    p.add_argument("--stride", type=int)
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", parents=[common], help="F1 / precision / sensitivity")
    p.add_argument("--mode", choices=["vs_annotations", "synthetic_vs_stained", "table"],
                   default="vs_annotations")
    p.add_argument("--pred", type=Path)
    p.add_argument("--ref", type=Path)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--synthetic", type=Path)
    p.add_argument("--stained", type=Path)
    p.add_argument("--label", choices=["synthetic", "stained"], default="synthetic")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="overlay images for an inference run")
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--manifest", type=Path)
    p.set_defaults(func=cmd_report)
    return parser


def _error(code: int, exc: Exception) -> int:
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    for attr in ("field", "path", "component", "epoch"):
        if getattr(exc, attr, None) is not None:
            record[attr] = getattr(exc, attr)
    print(json.dumps(record), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        return _error(EXIT_CONFIG, exc)
    except RuntimeFailure as exc:
        return _error(EXIT_RUNTIME, exc)
    except (OSError, RuntimeError, ValueError) as exc:
        return _error(EXIT_RUNTIME, exc)


if __name__ == "__main__":
    sys.exit(main())
