"""Turn a phantom manifest into in-memory training patches."""
from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .phantom import Manifest, PhantomSample, derive_seed
from .tiling import TILE_SIZE, normalize_intensity, sample_patches, scale_intensity

CK_CHANNELS = ("ck_true", "ck_stained")


def model_inputs(sample: PhantomSample) -> dict[str, np.ndarray]:
    """Model-range float32 rasters for one sample.

    DAPI is percentile-normalized over the whole sample; CK channels use the
    fixed 16-bit scale so that real and synthetic CK share one intensity axis.
    """
    return {
        "dapi": normalize_intensity(sample.dapi.channel()),
        "ck_true": scale_intensity(sample.ck_true.channel()),
        "ck_stained": scale_intensity(sample.ck_stained.channel()),
        "mask": sample.epithelium_mask.astype(np.float32),
    }


def load_patches(manifest: Manifest, split: str, patches_per_sample: int = 4,
                 policy: str = "mask_balanced", patch_size: int = TILE_SIZE) -> dict:
    """Sample aligned patches from every sample in ``split``.

    Patch positions depend only on each sample's seed, so every consumer of
    the manifest (either network, any channel) sees the same coordinates.
    Returns arrays of shape (N, 1, P, P) keyed by ``dapi``, ``ck_true``,
    ``ck_stained`` and ``mask``, plus the list of ``ids``.
    """
    entries = manifest.split(split)
    if not entries:
        raise ConfigError(f"manifest split {split!r} is empty", field=split)
    out = {k: [] for k in ("dapi", "ck_true", "ck_stained", "mask")}
    ids = []
    for entry in entries:
        sample = manifest.load(entry)
        inputs = model_inputs(sample)
        stack = np.stack([inputs["dapi"], inputs["ck_true"], inputs["ck_stained"],
                          inputs["mask"]])
        batch = sample_patches(stack, patches_per_sample, mask=sample.epithelium_mask,
                               policy=policy, patch_size=patch_size,
                               seed=derive_seed(entry["seed"], 7))
        for j, key in enumerate(("dapi", "ck_true", "ck_stained", "mask")):
            out[key].append(batch.patches[:, j:j + 1])
        ids.extend([entry["id"]] * len(batch.coords))
    arrays = {k: np.ascontiguousarray(np.concatenate(v), dtype=np.float32)
              for k, v in out.items()}
    arrays["ids"] = ids
    return arrays
