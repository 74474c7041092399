"""Procedural DAPI/CK/epithelium phantoms.

Epithelial compartments are thresholded low-frequency noise. Epithelial nuclei
are larger, rounder and packed more densely than stromal ones, and the clean
CK channel is an exponential distance halo around epithelial nuclei, restricted
to the epithelium. The CK signal is therefore a deterministic function of
nuclear morphology that a convolutional translator can learn from DAPI.

``ck_stained`` starts as a copy of ``ck_true`` and is then corrupted by the
artifact injectors (unspecific staining, loss of expression, necrosis, DAPI
defects), which is what a stained CK channel looks like to a segmenter.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .raster import SlideRaster, read_mask, read_uint16, write_mask, write_text, write_uint16

log = logging.getLogger(__name__)

ARTIFACT_KINDS = ("unspecific_ck", "ck_expression_loss", "necrotic_ck", "dapi_artifact")

# pairs of kinds that may not share a pixel
CONTRADICTORY = {
    frozenset({"unspecific_ck", "ck_expression_loss"}),
    frozenset({"necrotic_ck", "ck_expression_loss"}),
    frozenset({"unspecific_ck", "necrotic_ck"}),
    frozenset({"necrotic_ck", "dapi_artifact"}),
}

MAX_INTENSITY = 65535
MANIFEST_VERSION = 1


@dataclass
class ArtifactKindConfig:
    probability: float = 0.0
    max_count: int = 1
    radius_range: tuple[float, float] = (25.0, 45.0)

    def __post_init__(self):
        self.radius_range = tuple(float(r) for r in self.radius_range)
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigError("artifact probability must be in [0, 1]", field="probability")
        if self.max_count < 0:
            raise ConfigError("artifact max_count must be >= 0", field="max_count")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ConfigError("artifact radius_range must satisfy 0 < min <= max",
                              field="radius_range")


@dataclass
class ArtifactConfig:
    """Per-kind placement probabilities/sizes plus effect strengths."""

    unspecific_ck: ArtifactKindConfig = field(default_factory=ArtifactKindConfig)
    ck_expression_loss: ArtifactKindConfig = field(default_factory=ArtifactKindConfig)
    necrotic_ck: ArtifactKindConfig = field(default_factory=ArtifactKindConfig)
    dapi_artifact: ArtifactKindConfig = field(default_factory=ArtifactKindConfig)
    unspecific_level: float = 0.8  # fraction of ck_peak added
    expression_loss_factor: float = 0.1  # multiplier on ck_true
    necrotic_ck_level: float = 0.6
    necrotic_dapi_factor: float = 0.15
    dapi_artifact_mode: str = "random"  # saturate | dropout | random
    ck_peak: float = 30000.0  # reference intensity the added CK levels scale

    def __post_init__(self):
        for kind in ARTIFACT_KINDS:
            value = getattr(self, kind)
            if isinstance(value, dict):
                setattr(self, kind, ArtifactKindConfig(**value))
        if self.dapi_artifact_mode not in ("saturate", "dropout", "random"):
            raise ConfigError(f"unknown dapi_artifact_mode {self.dapi_artifact_mode!r}",
                              field="dapi_artifact_mode")
        if not 0.0 <= self.expression_loss_factor < 1.0:
            raise ConfigError("expression_loss_factor must be in [0, 1)",
                              field="expression_loss_factor")

    @classmethod
    def none(cls) -> "ArtifactConfig":
        return cls()

    def is_empty(self) -> bool:
        return all(getattr(self, k).probability == 0 or getattr(self, k).max_count == 0
                   for k in ARTIFACT_KINDS)


@dataclass
class PhantomSpec:
    width: int = 512
    height: int = 512
    resolution: float = 0.5
    epithelial_fraction: float = 0.4
    nucleus_density_epithelial: float = 14.0  # nuclei per 100x100 px
    nucleus_density_stromal: float = 3.0
    nucleus_radius_epithelial: tuple[float, float] = (5.0, 8.0)
    nucleus_radius_stromal: tuple[float, float] = (3.0, 5.0)
    ck_halo_radius: float = 8.0
    noise_level: float = 0.02
    blob_sigma: float = 28.0  # smoothing scale of the epithelial-region noise field
    basal_layer: bool = True  # row of epithelial nuclei lining the region boundary
    dapi_background: float = 1500.0
    dapi_peak: float = 30000.0
    ck_background: float = 800.0
    ck_peak: float = 30000.0
    separability_margin: float = 0.1  # min mean CK gap (fraction of ck_peak)
    artifact_config: ArtifactConfig = field(default_factory=ArtifactConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.artifact_config, dict):
            self.artifact_config = ArtifactConfig(**self.artifact_config)
        self.nucleus_radius_epithelial = tuple(self.nucleus_radius_epithelial)
        self.nucleus_radius_stromal = tuple(self.nucleus_radius_stromal)

    def validate(self):
        if self.width < 256 or self.height < 256:
            raise ConfigError(
                f"width and height must be >= 256 (got {self.width}x{self.height})",
                field="width/height")
        if not 0.0 <= self.epithelial_fraction <= 1.0:
            raise ConfigError(
                f"epithelial_fraction must be in [0, 1] (got {self.epithelial_fraction})",
                field="epithelial_fraction")
        if self.nucleus_density_epithelial <= 0 and self.nucleus_density_stromal <= 0:
            raise ConfigError("at least one nucleus density must be > 0",
                              field="nucleus_density")
        if self.nucleus_density_stromal < 0 or self.nucleus_density_epithelial < 0:
            raise ConfigError("nucleus densities must be >= 0", field="nucleus_density")
        if not self.nucleus_density_epithelial > self.nucleus_density_stromal:
            raise ConfigError(
                "nucleus_density_epithelial must exceed nucleus_density_stromal",
                field="nucleus_density_epithelial")
        if not 0.0 <= self.noise_level < 1.0:
            raise ConfigError("noise_level must be in [0, 1)", field="noise_level")
        if self.resolution <= 0:
            raise ConfigError("resolution must be > 0", field="resolution")
        for name in ("nucleus_radius_epithelial", "nucleus_radius_stromal"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name} must satisfy 0 < min <= max", field=name)
        if self.ck_halo_radius <= 0:
            raise ConfigError("ck_halo_radius must be > 0", field="ck_halo_radius")
        if max(self.dapi_background + self.dapi_peak * 1.5,
               self.ck_background + self.ck_peak * 2.0) > MAX_INTENSITY:
            raise ConfigError("peak intensities leave no headroom in the 16-bit range",
                              field="dapi_peak/ck_peak")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown phantom fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ArtifactAnnotation:
    kind: str
    region_mask: np.ndarray

    def __post_init__(self):
        if self.kind not in ARTIFACT_KINDS:
            raise ConfigError(f"unknown artifact kind {self.kind!r}")
        self.region_mask = np.asarray(self.region_mask, dtype=bool)


@dataclass
class PhantomSample:
    dapi: SlideRaster
    ck_true: SlideRaster
    ck_stained: SlideRaster
    epithelium_mask: np.ndarray
    artifacts: list[ArtifactAnnotation] = field(default_factory=list)
    # (N, 6): y, x, semi-axis a, semi-axis b, angle, is_epithelial
    nuclei: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))
    seed: int | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.epithelium_mask.shape

    def artifact_union(self, kinds: Iterable[str] = ARTIFACT_KINDS) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        kinds = set(kinds)
        for a in self.artifacts:
            if a.kind in kinds:
                out |= a.region_mask
        return out

    def check_invariants(self):
        shapes = {self.dapi.shape, self.ck_true.shape, self.ck_stained.shape,
                  self.epithelium_mask.shape}
        if len(shapes) != 1:
            raise ConfigError(f"sample rasters disagree in shape: {shapes}")
        res = {self.dapi.resolution, self.ck_true.resolution, self.ck_stained.resolution}
        if len(res) != 1:
            raise ConfigError("sample rasters disagree in resolution")
        for a in self.artifacts:
            if a.region_mask.shape != self.shape:
                raise ConfigError(f"{a.kind} region mask has shape {a.region_mask.shape}")
        outside = ~self.artifact_union()
        if not np.array_equal(self.ck_stained.channel()[outside],
                              self.ck_true.channel()[outside]):
            raise ConfigError("ck_stained differs from ck_true outside artifact regions")


# ---------------------------------------------------------------------------
# generation


def _epithelium_mask(rng, spec: PhantomSpec) -> np.ndarray:
    h, w = spec.height, spec.width
    frac = spec.epithelial_fraction
    if frac <= 0.0:
        return np.zeros((h, w), dtype=bool)
    if frac >= 1.0:
        return np.ones((h, w), dtype=bool)
    noise = rng.standard_normal((h, w))
    smooth = ndimage.gaussian_filter(noise, spec.blob_sigma, mode="wrap")
    # quantile threshold pins the covered fraction
    thr = np.quantile(smooth, 1.0 - frac)
    return smooth > thr


def _place_nuclei(rng, region: np.ndarray, density: float, radius_range,
                  aspect_range, epithelial: bool) -> np.ndarray:
    area = int(region.sum())
    count = int(round(density * area / 1e4))
    if count == 0 or area == 0:
        return np.zeros((0, 6))
    flat = np.flatnonzero(region)
    picks = flat[rng.integers(0, flat.size, size=count)]
    ys, xs = np.divmod(picks, region.shape[1])
    ys = ys + rng.uniform(-0.5, 0.5, count)
    xs = xs + rng.uniform(-0.5, 0.5, count)
    r = rng.uniform(radius_range[0], radius_range[1], count)
    aspect = rng.uniform(aspect_range[0], aspect_range[1], count)
    a = r * np.sqrt(aspect)
    b = r / np.sqrt(aspect)
    theta = rng.uniform(0, np.pi, count)
    flag = np.full(count, 1.0 if epithelial else 0.0)
    return np.stack([ys, xs, a, b, theta, flag], axis=1)


def _place_basal_nuclei(rng, mask: np.ndarray, radius_range) -> np.ndarray:
    """Epithelial nuclei lined up just inside the epithelium boundary.

    Candidates are pixels at depth ``r_mid + 1`` from the boundary; they are
    visited in random order and accepted greedily with a minimum spacing of
    ``2 * r_max + 2`` so the row is dense but non-overlapping.
    """
    if mask.all() or not mask.any():
        return np.zeros((0, 6))
    depth = ndimage.distance_transform_edt(mask)
    target = 0.5 * (radius_range[0] + radius_range[1]) + 1.0
    ys, xs = np.nonzero(np.abs(depth - target) <= 0.5)
    if ys.size == 0:
        return np.zeros((0, 6))
    order = rng.permutation(ys.size)
    spacing = 2.0 * radius_range[1] + 2.0
    blocked = np.zeros(mask.shape, dtype=bool)
    h, w = mask.shape
    rs = int(np.ceil(spacing))
    dy, dx = np.mgrid[-rs:rs + 1, -rs:rs + 1]
    disk = dy ** 2 + dx ** 2 < spacing ** 2
    kept = []
    for i in order:
        y, x = ys[i], xs[i]
        if blocked[y, x]:
            continue
        kept.append(i)
        y0, y1 = max(0, y - rs), min(h, y + rs + 1)
        x0, x1 = max(0, x - rs), min(w, x + rs + 1)
        blocked[y0:y1, x0:x1] |= disk[y0 - y + rs:y1 - y + rs, x0 - x + rs:x1 - x + rs]
    kept = np.asarray(kept)
    n = kept.size
    r = rng.uniform(radius_range[0], radius_range[1], n)
    aspect = rng.uniform(1.0, 1.4, n)
    return np.stack([ys[kept] + rng.uniform(-0.5, 0.5, n), xs[kept] + rng.uniform(-0.5, 0.5, n),
                     r * np.sqrt(aspect), r / np.sqrt(aspect), rng.uniform(0, np.pi, n),
                     np.ones(n)], axis=1)


def render_nuclei(nuclei: np.ndarray, shape, weights=None) -> np.ndarray:
    """Anti-aliased ellipse coverage in [0, 1]; overlaps combine by max.

    ``weights`` scales each nucleus (brightness jitter); coverage is 1 inside,
    0 outside and ramps linearly over one pixel at the boundary.
    """
    h, w = shape
    out = np.zeros(shape, dtype=np.float64)
    if weights is None:
        weights = np.ones(len(nuclei))
    for (cy, cx, a, b, theta, _), wt in zip(nuclei, weights):
        ext = int(math.ceil(max(a, b))) + 2
        y0, y1 = max(0, int(cy) - ext), min(h, int(cy) + ext + 1)
        x0, x1 = max(0, int(cx) - ext), min(w, int(cx) + ext + 1)
        if y0 >= y1 or x0 >= x1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        dy, dx = yy - cy, xx - cx
        c, s = math.cos(theta), math.sin(theta)
        u = dx * c + dy * s
        v = -dx * s + dy * c
        rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        cover = np.clip(0.5 - (rho - 1.0) * math.sqrt(a * b), 0.0, 1.0) * wt
        np.maximum(out[y0:y1, x0:x1], cover, out=out[y0:y1, x0:x1])
    return out


def _bounded_noise(rng, shape, sigma) -> np.ndarray:
    if sigma <= 0:
        return np.zeros(shape)
    return np.clip(rng.standard_normal(shape), -3.0, 3.0) * sigma


def _to_uint16(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(x), 0, MAX_INTENSITY).astype(np.uint16)


def ck_halo(epithelial_nuclei_cover: np.ndarray, mask: np.ndarray, halo_radius: float):
    """Exponential falloff of distance to the nearest epithelial nucleus, inside ``mask``."""
    if not mask.any():
        return np.zeros(mask.shape)
    inside = epithelial_nuclei_cover >= 0.5
    if not inside.any():
        return np.zeros(mask.shape)
    dist = ndimage.distance_transform_edt(~inside)
    return np.exp(-dist / halo_radius) * mask


def generate_phantom(spec: PhantomSpec) -> PhantomSample:
    """Build one paired sample; a pure function of ``spec`` (including its seed)."""
    spec.validate()
    ss = np.random.SeedSequence(spec.seed)
    geo_ss, nuc_ss, tex_ss, noise_ss, art_ss = ss.spawn(5)
    shape = (spec.height, spec.width)

    mask = _epithelium_mask(np.random.default_rng(geo_ss), spec)

    rng = np.random.default_rng(nuc_ss)
    epi = _place_nuclei(rng, mask, spec.nucleus_density_epithelial,
                        spec.nucleus_radius_epithelial, (1.0, 1.4), True)
    if spec.basal_layer:
        epi = np.concatenate([epi, _place_basal_nuclei(
            rng, mask, spec.nucleus_radius_epithelial)], axis=0)
    stro = _place_nuclei(rng, ~mask, spec.nucleus_density_stromal,
                         spec.nucleus_radius_stromal, (1.8, 3.5), False)
    nuclei = np.concatenate([epi, stro], axis=0)
    brightness = rng.uniform(0.8, 1.2, len(nuclei))

    cover = render_nuclei(nuclei, shape, brightness)
    tex_rng = np.random.default_rng(tex_ss)
    texture = ndimage.gaussian_filter(tex_rng.standard_normal(shape), 1.0) * 0.6
    texture = np.clip(texture, -0.5, 0.5)

    noise_rng = np.random.default_rng(noise_ss)
    dapi = (spec.dapi_background + spec.dapi_peak * cover * (1.0 + texture)
            + _bounded_noise(noise_rng, shape, spec.noise_level * spec.dapi_peak))

    epi_cover = render_nuclei(epi, shape) if len(epi) else np.zeros(shape)
    halo = ck_halo(epi_cover, mask, spec.ck_halo_radius)
    ck = (spec.ck_background + spec.ck_peak * halo
          + _bounded_noise(noise_rng, shape, spec.noise_level * spec.ck_peak))

    dapi_r = SlideRaster.single(_to_uint16(dapi), "DAPI", spec.resolution)
    ck_r = SlideRaster.single(_to_uint16(ck), "CK", spec.resolution)
    sample = PhantomSample(
        dapi=dapi_r,
        ck_true=ck_r,
        ck_stained=SlideRaster.single(ck_r.channel().copy(), "CK", spec.resolution),
        epithelium_mask=mask,
        nuclei=nuclei,
        seed=spec.seed,
    )
    _check_separability(sample, spec)
    if not spec.artifact_config.is_empty():
        seed = int(art_ss.generate_state(1, np.uint64)[0])
        sample = inject_artifacts(sample, spec.artifact_config, seed=seed)
    return sample


def _check_separability(sample: PhantomSample, spec: PhantomSpec):
    mask = sample.epithelium_mask
    if mask.all() or not mask.any():
        return
    ck = sample.ck_true.channel().astype(np.float64)
    gap = ck[mask].mean() - ck[~mask].mean()
    if gap < spec.separability_margin * spec.ck_peak:
        raise ConfigError(
            f"CK separability {gap:.1f} below margin "
            f"{spec.separability_margin * spec.ck_peak:.1f}; raise "
            "nucleus_density_epithelial or ck_halo_radius",
            field="separability_margin")


# ---------------------------------------------------------------------------
# artifacts


def disk_mask(shape, center, radius) -> np.ndarray:
    yy, xx = np.ogrid[:shape[0], :shape[1]]
    return (yy - center[0]) ** 2 + (xx - center[1]) ** 2 <= radius ** 2


def _radial_profile(shape, center, radius) -> np.ndarray:
    yy, xx = np.ogrid[:shape[0], :shape[1]]
    d2 = ((yy - center[0]) ** 2 + (xx - center[1]) ** 2) / radius ** 2
    return 0.5 + 0.5 * np.clip(1.0 - d2, 0.0, 1.0)


def _copy_sample(sample: PhantomSample) -> PhantomSample:
    def cp(r: SlideRaster):
        return replace(r, pixels=r.pixels.copy())
    return replace(
        sample,
        dapi=cp(sample.dapi), ck_true=cp(sample.ck_true), ck_stained=cp(sample.ck_stained),
        epithelium_mask=sample.epithelium_mask.copy(),
        artifacts=list(sample.artifacts), nuclei=sample.nuclei.copy(),
    )


def apply_artifact(sample: PhantomSample, kind: str, region: np.ndarray,
                   config: ArtifactConfig | None = None, rng=None,
                   center=None, radius=None) -> PhantomSample:
    """Apply one artifact of ``kind`` on ``region`` and record its annotation.

    Returns a new sample. Raises :class:`ConfigError` if ``region`` overlaps an
    existing region of a contradictory kind or falls outside the raster.
    """
    config = config or ArtifactConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    region = np.asarray(region, dtype=bool)
    if region.shape != sample.shape:
        raise ConfigError(f"artifact region shape {region.shape} != sample {sample.shape}")
    if not region.any():
        raise ConfigError(f"empty {kind} region")
    for other in sample.artifacts:
        if frozenset({kind, other.kind}) in CONTRADICTORY and (other.region_mask & region).any():
            raise ConfigError(f"{kind} region overlaps contradictory {other.kind} region")

    out = _copy_sample(sample)
    ys, xs = np.nonzero(region)
    if center is None:
        center = (ys.mean(), xs.mean())
    if radius is None:
        radius = max(1.0, math.sqrt(region.sum() / math.pi))
    profile = _radial_profile(sample.shape, center, radius)
    ck_peak = config.ck_peak
    stained = out.ck_stained.channel().astype(np.float64)
    dapi = out.dapi.channel().astype(np.float64)
    texture = np.clip(1.0 + 0.2 * rng.standard_normal(sample.shape), 0.6, 1.4)

    if kind == "unspecific_ck":
        add = config.unspecific_level * ck_peak * profile * texture
        stained[region] += np.maximum(add[region], 1.0)
    elif kind == "ck_expression_loss":
        stained[region] = np.floor(stained[region] * config.expression_loss_factor)
        # a zero-valued pixel would stay equal; the background offset prevents it
    elif kind == "necrotic_ck":
        mottle = np.clip(ndimage.gaussian_filter(rng.standard_normal(sample.shape), 3.0) * 3.0
                         + 1.0, 0.3, 1.5)
        add = config.necrotic_ck_level * ck_peak * profile * mottle
        stained[region] += np.maximum(add[region], 1.0)
        bg = float(np.percentile(dapi, 5))
        debris = (rng.random(sample.shape) < 0.01).astype(np.float64)
        debris = ndimage.gaussian_filter(debris, 1.0) * (dapi.max() - bg) * 0.5
        depleted = bg + (dapi - bg).clip(min=0) * config.necrotic_dapi_factor + debris
        dapi[region] = depleted[region]
    elif kind == "dapi_artifact":
        mode = config.dapi_artifact_mode
        if mode == "random":
            mode = "saturate" if rng.random() < 0.5 else "dropout"
        if mode == "saturate":
            dapi[region] = MAX_INTENSITY
        else:
            dapi[region] = 0
    else:
        raise ConfigError(f"unknown artifact kind {kind!r}")

    out.ck_stained.pixels[0] = _to_uint16(stained)
    out.dapi.pixels[0] = _to_uint16(dapi)
    out.artifacts.append(ArtifactAnnotation(kind, region.copy()))
    return out


def _candidate_region(kind, sample: PhantomSample, radius, rng, occupied, tries=50):
    h, w = sample.shape
    r = int(math.ceil(radius))
    if 2 * r + 1 > min(h, w):
        raise ConfigError(f"{kind} radius {radius} does not fit in {w}x{h} raster",
                          field="radius_range")
    mask = sample.epithelium_mask
    if kind == "ck_expression_loss":
        compartment = mask
    elif kind in ("unspecific_ck", "necrotic_ck"):
        compartment = ~mask
    else:
        compartment = np.ones_like(mask)
    valid = np.zeros_like(mask)
    valid[r:h - r, r:w - r] = compartment[r:h - r, r:w - r]
    flat = np.flatnonzero(valid)
    if flat.size == 0:
        return None
    for _ in range(tries):
        cy, cx = np.divmod(flat[rng.integers(0, flat.size)], w)
        region = disk_mask(sample.shape, (cy, cx), radius)
        if kind != "dapi_artifact":
            region &= compartment
        if region.sum() < 0.25 * math.pi * radius ** 2:
            continue
        if (region & occupied).any():
            continue
        return region, (cy, cx)
    return None


def inject_artifacts(sample: PhantomSample, artifact_config: ArtifactConfig,
                     seed: int = 0) -> PhantomSample:
    """Randomly place artifacts per ``artifact_config`` and apply them.

    Placement keeps new regions disjoint from every existing region so that
    region-restricted statistics stay attributable to a single kind. Kinds
    whose compartment is absent (e.g. expression loss without epithelium) are
    skipped.
    """
    sample.check_invariants()
    rng = np.random.default_rng(seed)
    out = sample
    occupied = sample.artifact_union()
    for kind in ARTIFACT_KINDS:
        kc: ArtifactKindConfig = getattr(artifact_config, kind)
        for _ in range(kc.max_count):
            if rng.random() >= kc.probability:
                continue
            radius = rng.uniform(*kc.radius_range)
            found = _candidate_region(kind, out, radius, rng, occupied)
            if found is None:
                log.debug("no room for %s (r=%.1f)", kind, radius)
                continue
            region, center = found
            out = apply_artifact(out, kind, region, artifact_config, rng, center, radius)
            occupied |= region
    return out


# ---------------------------------------------------------------------------
# datasets


def split_counts(n: int, ratios=(0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    """Train gets ``floor(r_train * n)``; the remainder fills val first, then test."""
    r_train, r_val, r_test = ratios
    total = r_train + r_val + r_test
    if total <= 0 or min(ratios) < 0:
        raise ConfigError(f"invalid split ratios {ratios}", field="split")
    r_train, r_val, r_test = r_train / total, r_val / total, r_test / total
    n_train = int(math.floor(r_train * n + 1e-9))
    rest = n - n_train
    if r_val + r_test == 0:
        return n, 0, 0
    n_val = min(rest, int(math.ceil(rest * r_val / (r_val + r_test) - 1e-9)))
    return n_train, n_val, rest - n_val


def derive_seed(master_seed: int, index: int) -> int:
    state = np.random.SeedSequence([int(master_seed) & (2**64 - 1), index]).generate_state(
        2, np.uint32)
    return (int(state[0]) | (int(state[1]) << 32)) & (2**63 - 1)


def _sample_files(sample_id: str) -> dict:
    return {
        "dapi": f"{sample_id}/dapi.tif",
        "ck_true": f"{sample_id}/ck_true.tif",
        "ck_stained": f"{sample_id}/ck_stained.tif",
        "epithelium_mask": f"{sample_id}/epithelium_mask.png",
        "meta": f"{sample_id}/meta.json",
    }


def save_sample(sample: PhantomSample, root, sample_id: str) -> dict:
    root = Path(root)
    files = _sample_files(sample_id)
    res = sample.dapi.resolution
    write_uint16(root / files["dapi"], sample.dapi.channel(), res, ["DAPI"])
    write_uint16(root / files["ck_true"], sample.ck_true.channel(), res, ["CK"])
    write_uint16(root / files["ck_stained"], sample.ck_stained.channel(), res, ["CK"])
    write_mask(root / files["epithelium_mask"], sample.epithelium_mask)
    artifacts = []
    for i, a in enumerate(sample.artifacts):
        rel = f"{sample_id}/artifact_{i:02d}_{a.kind}.png"
        write_mask(root / rel, a.region_mask)
        artifacts.append({"kind": a.kind, "mask": rel})
    meta = {"resolution": res, "seed": sample.seed, "nuclei": sample.nuclei.tolist(),
            "artifacts": artifacts}
    write_text(root / files["meta"], json.dumps(meta))
    files["artifacts"] = artifacts
    return files


def load_sample(root, entry: dict) -> PhantomSample:
    """Reload a sample written by :func:`save_sample` from its manifest entry."""
    root = Path(root)
    files = entry["files"]
    meta = json.loads((root / files["meta"]).read_text())
    res = meta["resolution"]
    dapi, _ = read_uint16(root / files["dapi"])
    ck_true, _ = read_uint16(root / files["ck_true"])
    ck_stained, _ = read_uint16(root / files["ck_stained"])
    artifacts = [ArtifactAnnotation(a["kind"], read_mask(root / a["mask"]))
                 for a in meta["artifacts"]]
    nuclei = np.asarray(meta["nuclei"], dtype=np.float64).reshape(-1, 6)
    return PhantomSample(
        dapi=SlideRaster.single(dapi, "DAPI", res),
        ck_true=SlideRaster.single(ck_true, "CK", res),
        ck_stained=SlideRaster.single(ck_stained, "CK", res),
        epithelium_mask=read_mask(root / files["epithelium_mask"]),
        artifacts=artifacts, nuclei=nuclei, seed=meta["seed"],
    )


@dataclass
class Manifest:
    root: Path
    data: dict

    @property
    def samples(self) -> list[dict]:
        return self.data["samples"]

    def split(self, name: str) -> list[dict]:
        return [s for s in self.samples if s["split"] == name]

    def load(self, entry: dict) -> PhantomSample:
        return load_sample(self.root, entry)

    @property
    def path(self) -> Path:
        return self.root / "manifest.json"

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        if not path.exists():
            raise ConfigError(f"manifest not found: {path}", path=str(path))
        return cls(path.parent, json.loads(path.read_text()))


def _manifest_json(data: dict) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def build_phantom_dataset(spec_template: PhantomSpec, n_samples: int, out_dir,
                          split=(0.8, 0.1, 0.1), workers: int = 1) -> Manifest:
    """Generate ``n_samples`` phantoms under ``out_dir`` and write ``manifest.json``.

    Per-sample seeds derive from ``spec_template.seed``. The manifest is
    rewritten after every completed sample; rerunning into the same directory
    skips samples already marked complete, so an interrupted build resumes.
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1", field="n_samples")
    spec_template.validate()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory not writable: {out_dir} ({exc})",
                          path=str(out_dir)) from exc

    master = int(spec_template.seed)
    counts = split_counts(n_samples, split)
    order = np.random.default_rng(derive_seed(master, 2**31)).permutation(n_samples)
    labels = np.empty(n_samples, dtype=object)
    labels[order[:counts[0]]] = "train"
    labels[order[counts[0]:counts[0] + counts[1]]] = "val"
    labels[order[counts[0] + counts[1]:]] = "test"

    header = {
        "format_version": MANIFEST_VERSION,
        "master_seed": master,
        "n_samples": n_samples,
        "split_ratios": list(split),
        "spec": spec_template.to_dict(),
    }
    entries: list[dict | None] = [None] * n_samples
    manifest_path = out_dir / "manifest.json"
    if manifest_path.exists():
        old = json.loads(manifest_path.read_text())
        if {k: old.get(k) for k in header} == json.loads(json.dumps(header)):
            for e in old.get("samples", []):
                done = all((out_dir / p).exists() for k, p in e["files"].items()
                           if k != "artifacts")
                if e.get("status") == "complete" and done:
                    entries[e["index"]] = e

    def make(i: int) -> dict:
        seed = derive_seed(master, i)
        sample = generate_phantom(replace(spec_template, seed=seed))
        sid = f"sample_{i:04d}"
        files = save_sample(sample, out_dir, sid)
        return {"id": sid, "index": i, "seed": seed, "split": str(labels[i]),
                "files": files, "status": "complete"}

    def flush():
        data = dict(header, samples=[e for e in entries if e is not None])
        write_text(manifest_path, _manifest_json(data))

    todo = [i for i in range(n_samples) if entries[i] is None]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            for i, entry in zip(todo, pool.map(make, todo)):
                entries[i] = entry
                flush()
    else:
        for i in todo:
            entries[i] = make(i)
            flush()
    flush()
    return Manifest.read(manifest_path)
