"""Slide-scale two-step inference: DAPI -> synthetic CK -> epithelium mask."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint
from .errors import ConfigError
from .raster import SlideRaster
from .segmentation import SegUNet, binarize, load_segmenter
from .tiling import (MODEL_RANGE, TILE_SIZE, extract_tiles, normalize_intensity, pad_to_min,
                     plan_tiles, scale_intensity, stitch, unscale_intensity)
from .translation import UNetGenerator, load_generator


@dataclass
class TwoStepResult:
    synthetic_ck: SlideRaster  # uint16
    synthetic_ck_model: np.ndarray  # float32, model range
    probability_map: np.ndarray  # float32 in [0, 1]
    epithelium_mask: np.ndarray  # bool
    report: dict = field(default_factory=dict)


def tiled_apply(fn: Callable[[np.ndarray], np.ndarray], raster: np.ndarray, stride: int,
                blend: str = "cosine_ramp", batch_size: int = 8,
                tile_size: int = TILE_SIZE) -> np.ndarray:
    """plan_tiles -> batched per-tile ``fn`` -> stitch, for a (H, W) float raster.

    ``fn`` maps (N, 1, T, T) to (N, 1, T, T). Rasters smaller than a tile are
    reflect-padded and the output cropped back.
    """
    padded, (h, w) = pad_to_min(raster, tile_size)
    plan = plan_tiles(padded.shape[1], padded.shape[0], tile_size, stride, blend)
    tiles = extract_tiles(padded, plan)[:, None]
    outputs = []
    for i in range(0, len(tiles), batch_size):
        outputs.extend(fn(np.ascontiguousarray(tiles[i:i + batch_size], dtype=np.float32)))
    out = stitch(zip(plan.tiles, (o[0] for o in outputs)), plan)
    return out[:h, :w]


def _torch_fn(model: torch.nn.Module, squash=None):
    model.eval()

    def fn(batch):
        with torch.no_grad():
            y = model(torch.from_numpy(batch))
            if squash is not None:
                y = squash(y)
        return y.numpy()
    return fn


def _resolve(generator, segmenter):
    if not isinstance(generator, UNetGenerator):
        generator = load_generator(generator)
    if not isinstance(segmenter, SegUNet):
        segmenter = load_segmenter(segmenter)
    return generator, segmenter


def check_compatible(generator: UNetGenerator, segmenter: SegUNet, tile_size: int = TILE_SIZE):
    if tile_size % (2 ** generator.config.depth):
        raise ConfigError(f"generator depth {generator.config.depth} incompatible with "
                          f"tile size {tile_size}", field="generator.depth")
    if tile_size % (2 ** segmenter.config.depth):
        raise ConfigError(f"segmenter depth {segmenter.config.depth} incompatible with "
                          f"tile size {tile_size}", field="segmentation.depth")
    if generator.config.input_channels != 1:
        raise ConfigError("generator must take one DAPI channel",
                          field="generator.input_channels")
    if generator.config.output_channels != segmenter.config.input_channels:
        raise ConfigError("generator output channels != segmenter input channels",
                          field="segmentation.input_channels")
    if tuple(generator.config.output_range) != MODEL_RANGE:
        raise ConfigError(f"generator output_range {generator.config.output_range} != "
                          f"{MODEL_RANGE}", field="generator.output_range")


def region_statistics(regions: Sequence[tuple[str, np.ndarray]], synthetic_ck: np.ndarray,
                      synthetic_model: np.ndarray, prob: np.ndarray, mask: np.ndarray) -> list:
    stats = []
    covered = np.zeros(mask.shape, dtype=bool)
    for kind, region in regions:
        region = np.asarray(region, dtype=bool)
        if region.shape != mask.shape:
            raise ConfigError(f"{kind} region shape {region.shape} != slide {mask.shape}")
        covered |= region
        stats.append(_stats(kind, region, synthetic_ck, synthetic_model, prob, mask))
    if regions and (~covered).any():
        stats.append(_stats("outside_regions", ~covered, synthetic_ck, synthetic_model,
                            prob, mask))
    return stats


def _stats(kind, region, ck, ck_model, prob, mask):
    return {
        "kind": kind,
        "pixels": int(region.sum()),
        "mean_synthetic_ck": float(ck[region].mean()),
        "mean_synthetic_ck_model": float(ck_model[region].mean()),
        "mean_probability": float(prob[region].mean()),
        "positive_fraction": float(mask[region].mean()),
    }


def run_two_step(dapi_slide: SlideRaster | np.ndarray, dapi2ck_checkpoint, seg_checkpoint,
                 stride: int = 128, blend: str = "cosine_ramp", threshold: float | None = None,
                 artifact_regions: Sequence[tuple[str, np.ndarray]] = (),
                 batch_size: int = 8) -> TwoStepResult:
    """Synthesize CK over the whole slide, then segment the stitched synthetic CK.

    Both passes are plan -> per-tile forward -> stitch. DAPI is percentile
    normalized once over the whole slide. ``artifact_regions`` (kind, mask)
    pairs are summarized in the report so DAPI defects can be inspected.
    """
    if not isinstance(dapi_slide, SlideRaster):
        dapi_slide = SlideRaster.single(np.asarray(dapi_slide))
    generator, segmenter = _resolve(dapi2ck_checkpoint, seg_checkpoint)
    check_compatible(generator, segmenter)
    thr = segmenter.config.threshold if threshold is None else threshold

    dapi = normalize_intensity(dapi_slide.channel(0))
    synthetic = tiled_apply(_torch_fn(generator), dapi, stride, blend, batch_size)
    prob = tiled_apply(_torch_fn(segmenter, torch.sigmoid), synthetic, stride, blend, batch_size)
    mask = binarize(prob, thr)
    ck16 = unscale_intensity(synthetic)

    report = {
        "height": dapi_slide.height,
        "width": dapi_slide.width,
        "resolution": dapi_slide.resolution,
        "tile_size": TILE_SIZE,
        "stride": stride,
        "blend": blend,
        "threshold": thr,
        "positive_fraction": float(mask.mean()),
        "regions": region_statistics(artifact_regions, ck16, synthetic, prob, mask),
    }
    ids = {}
    for name, ck in (("dapi2ck", dapi2ck_checkpoint), ("segmentation", seg_checkpoint)):
        if isinstance(ck, Checkpoint):
            ids[name] = ck.fingerprint()
        elif not isinstance(ck, torch.nn.Module):
            ids[name] = str(ck)
    report["checkpoints"] = ids
    return TwoStepResult(
        synthetic_ck=SlideRaster.single(ck16, "CK_synthetic", dapi_slide.resolution),
        synthetic_ck_model=synthetic,
        probability_map=prob,
        epithelium_mask=mask,
        report=report,
    )


def segment_ck(ck_slide: SlideRaster | np.ndarray, seg_checkpoint, stride: int = 128,
               blend: str = "cosine_ramp", threshold: float | None = None,
               batch_size: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Step two alone on a (stained) 16-bit CK slide: returns (probability, mask)."""
    if isinstance(ck_slide, SlideRaster):
        ck_slide = ck_slide.channel(0)
    segmenter = seg_checkpoint if isinstance(seg_checkpoint, SegUNet) else \
        load_segmenter(seg_checkpoint)
    thr = segmenter.config.threshold if threshold is None else threshold
    x = scale_intensity(ck_slide)
    prob = tiled_apply(_torch_fn(segmenter, torch.sigmoid), x, stride, blend, batch_size)
    return prob, binarize(prob, thr)
