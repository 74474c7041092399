"""Tile planning, stitching, patch sampling and intensity normalization."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

TILE_SIZE = 256
MODEL_RANGE = (-1.0, 1.0)
BLENDS = ("uniform_average", "cosine_ramp")


@dataclass(frozen=True)
class TilePlan:
    width: int
    height: int
    tile_size: int
    stride: int
    tiles: tuple[tuple[int, int], ...]  # (x, y) top-left corners, row-major
    edge_policy: str = "clamp_to_border"
    blend: str = "cosine_ramp"

    def weight(self) -> np.ndarray:
        return blend_weight(self.tile_size, self.blend)


def _axis_positions(extent: int, tile: int, stride: int) -> list[int]:
    n = math.ceil((extent - tile) / stride) + 1
    return [min(i * stride, extent - tile) for i in range(n)]


def plan_tiles(width: int, height: int, tile_size: int = TILE_SIZE, stride: int = 128,
               blend: str = "cosine_ramp") -> TilePlan:
    """Cover a ``width`` x ``height`` raster with tiles, clamping the last row/column inward."""
    if width < tile_size or height < tile_size:
        raise ConfigError(
            f"raster {width}x{height} smaller than tile size {tile_size}; pad first",
            field="tile_size")
    if not 1 <= stride <= tile_size:
        raise ConfigError(f"stride must be in [1, {tile_size}], got {stride}", field="stride")
    if blend not in BLENDS:
        raise ConfigError(f"unknown blend {blend!r}", field="blend")
    xs = _axis_positions(width, tile_size, stride)
    ys = _axis_positions(height, tile_size, stride)
    tiles = tuple((x, y) for y in ys for x in xs)
    return TilePlan(width, height, tile_size, stride, tiles, "clamp_to_border", blend)


def blend_weight(tile_size: int, blend: str) -> np.ndarray:
    if blend == "uniform_average":
        return np.ones((tile_size, tile_size))
    if blend == "cosine_ramp":
        # Hann window sampled at pixel centres: strictly positive everywhere
        i = np.arange(tile_size) + 0.5
        w = 0.5 - 0.5 * np.cos(2 * np.pi * i / tile_size)
        return np.outer(w, w)
    raise ConfigError(f"unknown blend {blend!r}", field="blend")


class StitchAccumulator:
    """Weighted running sums; ``result()`` is ``value_sum / weight_sum``.

    Sums are float64 so that a pixel covered by a single tile comes back
    bit-identical after casting to the tile dtype.
    """

    def __init__(self, height: int, width: int, channels: int | None = None):
        shape = (height, width) if channels is None else (channels, height, width)
        self.value_sum = np.zeros(shape)
        self.weight_sum = np.zeros((height, width))

    def deposit(self, x: int, y: int, tile: np.ndarray, weight: np.ndarray):
        t = tile.shape[-1]
        self.value_sum[..., y:y + t, x:x + t] += tile * weight
        self.weight_sum[y:y + t, x:x + t] += weight

    def result(self, dtype=np.float32) -> np.ndarray:
        if not (self.weight_sum > 0).all():
            raise ConfigError("stitch left pixels without coverage")
        return (self.value_sum / self.weight_sum).astype(dtype)


def stitch(tile_outputs, plan: TilePlan, dtype=np.float32) -> np.ndarray:
    """Blend per-tile outputs back onto the plan's raster.

    ``tile_outputs`` is an iterable of ``((x, y), array)`` with arrays of shape
    (T, T) or (C, T, T). Every planned tile must appear exactly once.
    """
    outputs = list(tile_outputs)
    coords = [tuple(int(v) for v in c) for c, _ in outputs]
    planned = set(plan.tiles)
    missing = planned - set(coords)
    extra = [c for c in coords if c not in planned]
    if missing or extra or len(coords) != len(set(coords)):
        raise ConfigError(f"tile outputs do not match plan: missing={sorted(missing)[:5]} "
                          f"extra={extra[:5]} duplicates={len(coords) - len(set(coords))}")
    first = np.asarray(outputs[0][1])
    t = plan.tile_size
    if first.shape[-2:] != (t, t):
        raise ConfigError(f"tile shape {first.shape} does not match tile_size {t}")
    channels = first.shape[0] if first.ndim == 3 else None
    acc = StitchAccumulator(plan.height, plan.width, channels)
    weight = plan.weight()
    for (x, y), tile in zip(coords, (o for _, o in outputs)):
        tile = np.asarray(tile)
        if tile.shape != first.shape:
            raise ConfigError(f"tile at {(x, y)} has shape {tile.shape}, expected {first.shape}")
        acc.deposit(x, y, tile, weight)
    return acc.result(dtype)


def extract_tiles(raster: np.ndarray, plan: TilePlan) -> np.ndarray:
    """Stack plan tiles from a (H, W) or (C, H, W) raster into (N, [C,] T, T)."""
    t = plan.tile_size
    return np.stack([raster[..., y:y + t, x:x + t] for x, y in plan.tiles])


# ---------------------------------------------------------------------------
# normalization


def normalize_intensity(raster: np.ndarray, low_pct: float = 1.0, high_pct: float = 99.0,
                        out_range=MODEL_RANGE) -> np.ndarray:
    """Map the low/high percentiles onto ``out_range`` and clip.

    Constant rasters map to the range midpoint.
    """
    x = np.asarray(raster, dtype=np.float64)
    if x.size == 0:
        raise ConfigError("cannot normalize an empty raster")
    lo_out, hi_out = out_range
    lo, hi = np.percentile(x, [low_pct, high_pct])
    if hi <= lo:
        return np.full(x.shape, (lo_out + hi_out) / 2, dtype=np.float32)
    unit = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return (lo_out + unit * (hi_out - lo_out)).astype(np.float32)


def scale_intensity(raster: np.ndarray, max_value: float = 65535.0,
                    out_range=MODEL_RANGE) -> np.ndarray:
    """Fixed affine map ``[0, max_value] -> out_range`` used for CK channels."""
    lo_out, hi_out = out_range
    unit = np.clip(np.asarray(raster, dtype=np.float64) / max_value, 0.0, 1.0)
    return (lo_out + unit * (hi_out - lo_out)).astype(np.float32)


def unscale_intensity(values: np.ndarray, max_value: float = 65535.0,
                      out_range=MODEL_RANGE) -> np.ndarray:
    """Inverse of :func:`scale_intensity`, rounded to uint16."""
    lo_out, hi_out = out_range
    unit = (np.asarray(values, dtype=np.float64) - lo_out) / (hi_out - lo_out)
    return np.clip(np.round(unit * max_value), 0, 65535).astype(np.uint16)


# ---------------------------------------------------------------------------
# patch sampling

MIN_POSITIVE_FRACTION = 0.4
MIN_PATCH_COVERAGE = 0.10


@dataclass
class PatchBatch:
    coords: list[tuple[int, int]]  # (x, y)
    patches: np.ndarray  # (n, C, P, P)
    masks: np.ndarray | None  # (n, P, P) or None
    metadata: dict = field(default_factory=dict)


def patch_coverage(mask: np.ndarray, patch_size: int) -> np.ndarray:
    """Fraction of positive pixels for every valid top-left position, via a summed-area table."""
    m = np.asarray(mask, dtype=np.int64)
    sat = np.zeros((m.shape[0] + 1, m.shape[1] + 1), dtype=np.int64)
    sat[1:, 1:] = m.cumsum(0).cumsum(1)
    p = patch_size
    total = sat[p:, p:] - sat[:-p, p:] - sat[p:, :-p] + sat[:-p, :-p]
    return total / float(p * p)


def sample_patches(raster: np.ndarray, n: int, mask: np.ndarray | None = None,
                   policy: str = "uniform", patch_size: int = TILE_SIZE,
                   seed: int = 0) -> PatchBatch:
    """Draw ``n`` aligned patches from a (C, H, W) or (H, W) raster.

    ``mask_balanced`` draws the first ``ceil(n/2)`` patches from positions whose
    mask coverage is at least 10%, the rest uniformly. If no such position
    exists it falls back to uniform and sets ``metadata['balance_fallback']``.
    """
    arr = np.asarray(raster)
    if arr.ndim == 2:
        arr = arr[None]
    _, h, w = arr.shape
    if h < patch_size or w < patch_size:
        raise ConfigError(f"raster {w}x{h} smaller than patch size {patch_size}")
    if policy not in ("uniform", "mask_balanced"):
        raise ConfigError(f"unknown sampling policy {policy!r}", field="policy")
    if policy == "mask_balanced" and mask is None:
        raise ConfigError("mask_balanced sampling needs a mask", field="mask")
    if mask is not None and np.asarray(mask).shape != (h, w):
        raise ConfigError(f"mask shape {np.asarray(mask).shape} != raster {(h, w)}")

    rng = np.random.default_rng(seed)
    ny, nx = h - patch_size + 1, w - patch_size + 1
    meta = {"policy": policy, "balance_fallback": False}
    coords: list[tuple[int, int]] = []
    n_pos = 0
    if policy == "mask_balanced":
        cov = patch_coverage(mask, patch_size)
        good = np.flatnonzero(cov >= MIN_PATCH_COVERAGE)
        if good.size == 0:
            meta["balance_fallback"] = True
        else:
            n_pos = math.ceil(n / 2)
            for idx in good[rng.integers(0, good.size, size=n_pos)]:
                y, x = divmod(int(idx), nx)
                coords.append((x, y))
    for _ in range(n - n_pos):
        coords.append((int(rng.integers(0, nx)), int(rng.integers(0, ny))))

    p = patch_size
    patches = np.stack([arr[:, y:y + p, x:x + p] for x, y in coords]) if coords else \
        np.zeros((0, arr.shape[0], p, p), arr.dtype)
    masks = None
    if mask is not None:
        m = np.asarray(mask)
        masks = np.stack([m[y:y + p, x:x + p] for x, y in coords]) if coords else \
            np.zeros((0, p, p), m.dtype)
    return PatchBatch(coords, patches, masks, meta)


def pad_to_min(raster: np.ndarray, size: int = TILE_SIZE) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad the trailing two axes up to ``size``; returns the original (H, W)."""
    h, w = raster.shape[-2:]
    ph, pw = max(0, size - h), max(0, size - w)
    if ph == 0 and pw == 0:
        return raster, (h, w)
    pad = [(0, 0)] * (raster.ndim - 2) + [(0, ph), (0, pw)]
    mode = "reflect" if min(h, w) > 1 else "edge"
    return np.pad(raster, pad, mode=mode), (h, w)
