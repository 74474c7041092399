"""Slide rasters and lossless image I/O."""
from __future__ import annotations

import os
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import tifffile
from PIL import Image

from .errors import ConfigError


@dataclass
class SlideRaster:
    """A (C, H, W) intensity stack with physical resolution metadata."""

    pixels: np.ndarray
    channels: tuple[str, ...] = ("DAPI",)
    resolution: float = 0.5  # micrometers per pixel
    bit_depth: int = 16

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[None]
        if px.ndim != 3:
            raise ConfigError(f"raster must be 2-D or (C, H, W), got shape {px.shape}")
        self.pixels = px
        self.channels = tuple(self.channels)
        if len(self.channels) != px.shape[0]:
            raise ConfigError(
                f"{len(self.channels)} channel names for {px.shape[0]} channels"
            )
        if not self.resolution > 0:
            raise ConfigError("resolution must be > 0", field="resolution")

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[1:]

    def channel(self, name: str | int = 0) -> np.ndarray:
        if isinstance(name, str):
            if name not in self.channels:
                raise ConfigError(f"channel {name!r} not in {self.channels}")
            name = self.channels.index(name)
        return self.pixels[name]

    @classmethod
    def single(cls, array, name="DAPI", resolution=0.5, bit_depth=16) -> "SlideRaster":
        return cls(np.asarray(array)[None], (name,), resolution, bit_depth)


@contextmanager
def atomic_path(path):
    """Yield a temporary sibling path that is renamed onto ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=path.suffix)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text(path, text: str):
    with atomic_path(path) as tmp:
        tmp.write_text(text)


def write_uint16(path, array: np.ndarray, resolution: float | None = None,
                 channels: Sequence[str] | None = None):
    """Write a 16-bit TIFF (2-D, or (C, H, W) for multi-channel)."""
    array = np.asarray(array)
    if array.dtype != np.uint16:
        raise ValueError(f"expected uint16, got {array.dtype}")
    meta = {}
    if resolution is not None:
        meta["resolution_um"] = float(resolution)
    if channels is not None:
        meta["channels"] = list(channels)
    with atomic_path(path) as tmp:
        tifffile.imwrite(tmp, array, metadata=meta or None)


def read_uint16(path) -> tuple[np.ndarray, dict]:
    with tifffile.TiffFile(path) as tf:
        arr = tf.asarray()
        meta = tf.shaped_metadata[0] if tf.shaped_metadata else {}
    return arr, dict(meta)


def write_mask(path, mask: np.ndarray):
    """Binary mask as an 8-bit PNG with values {0, 255}."""
    img = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    with atomic_path(path) as tmp:
        Image.fromarray(img).save(tmp, format="PNG")


def read_mask(path) -> np.ndarray:
    return np.asarray(Image.open(path)) > 127


def write_probability(path, prob: np.ndarray):
    img = np.round(np.clip(prob, 0.0, 1.0) * 255).astype(np.uint8)
    with atomic_path(path) as tmp:
        Image.fromarray(img).save(tmp, format="PNG")


def read_probability(path) -> np.ndarray:
    return np.asarray(Image.open(path)).astype(np.float32) / 255.0


def write_rgb(path, rgb: np.ndarray):
    with atomic_path(path) as tmp:
        Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(tmp, format="PNG")


def read_slide(path, channel_names: Sequence[str] | None = None,
               resolution: float | None = None) -> SlideRaster:
    """Load a single- or multi-channel TIFF/PNG into a :class:`SlideRaster`.

    Resolution comes from the file's metadata unless given explicitly.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"input not found: {path}", path=str(path))
    if path.suffix.lower() in (".tif", ".tiff"):
        arr, meta = read_uint16(path)
    else:
        arr, meta = np.asarray(Image.open(path)), {}
    if arr.ndim == 2:
        arr = arr[None]
    names = channel_names or meta.get("channels") or [f"ch{i}" for i in range(arr.shape[0])]
    res = resolution if resolution is not None else float(meta.get("resolution_um", 0.5))
    depth = 16 if arr.dtype == np.uint16 else 8 * arr.dtype.itemsize
    return SlideRaster(arr, tuple(names), res, depth)
