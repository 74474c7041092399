"""Pixel-level F1 / precision / sensitivity against reference masks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError

UNDEFINED_POLICY = "flag"  # undefined metrics are reported as None and listed


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


@dataclass
class FOVRegion:
    """A region of interest: either a boolean mask or an ``(x, y, w, h)`` rectangle."""

    identifier: str
    mask: np.ndarray | None = None
    rect: tuple[int, int, int, int] | None = None

    def to_mask(self, shape) -> np.ndarray:
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool)
            if m.shape != tuple(shape):
                raise ConfigError(f"ROI {self.identifier!r} mask shape {m.shape} != {tuple(shape)}")
            return m
        if self.rect is None:
            raise ConfigError(f"ROI {self.identifier!r} has neither mask nor rect")
        x, y, w, h = self.rect
        if x < 0 or y < 0 or w <= 0 or h <= 0 or x + w > shape[1] or y + h > shape[0]:
            raise ConfigError(f"ROI {self.identifier!r} rect {self.rect} outside {tuple(shape)}")
        m = np.zeros(shape, dtype=bool)
        m[y:y + h, x:x + w] = True
        return m


@dataclass
class MetricsReport:
    f1: float | None
    precision: float | None
    sensitivity: float | None
    counts: ConfusionCounts
    roi_id: str | None = None
    aggregation: str = "single"
    undefined_policy: str = UNDEFINED_POLICY
    undefined: tuple[str, ...] = ()
    identifiers: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "roi_id": self.roi_id,
            "f1": self.f1,
            "precision": self.precision,
            "sensitivity": self.sensitivity,
            "undefined": list(self.undefined),
            "undefined_policy": self.undefined_policy,
            "aggregation": self.aggregation,
            "counts": self.counts.as_dict(),
            **({"identifiers": self.identifiers} if self.identifiers else {}),
        }


def confusion(pred_mask, ref_mask, roi: FOVRegion | np.ndarray | None = None) -> ConfusionCounts:
    pred = np.asarray(pred_mask, dtype=bool)
    ref = np.asarray(ref_mask, dtype=bool)
    if pred.shape != ref.shape:
        raise ConfigError(f"mask shapes differ: pred {pred.shape} vs ref {ref.shape}")
    if roi is not None:
        sel = roi.to_mask(pred.shape[-2:]) if isinstance(roi, FOVRegion) else np.asarray(roi, bool)
        if sel.shape != pred.shape[-2:]:
            raise ConfigError(f"ROI shape {sel.shape} != mask shape {pred.shape}")
        sel = np.broadcast_to(sel, pred.shape)
        pred, ref = pred[sel], ref[sel]
    tp = int(np.count_nonzero(pred & ref))
    fp = int(np.count_nonzero(pred & ~ref))
    fn = int(np.count_nonzero(~pred & ref))
    tn = int(pred.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, fn, tn)


def metrics(counts: ConfusionCounts, roi_id: str | None = None,
            aggregation: str = "single") -> MetricsReport:
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    undefined = []

    def ratio(num, den, name):
        if den == 0:
            undefined.append(name)
            return None
        return num / den

    f1 = ratio(2 * tp, 2 * tp + fp + fn, "f1")
    precision = ratio(tp, tp + fp, "precision")
    sensitivity = ratio(tp, tp + fn, "sensitivity")
    return MetricsReport(f1, precision, sensitivity, counts, roi_id, aggregation,
                         UNDEFINED_POLICY, tuple(undefined))


@dataclass
class EvaluationResult:
    per_fov: dict[str, MetricsReport]
    pooled: MetricsReport
    reference: str = "annotations"

    def to_dict(self) -> dict:
        return {
            "reference": self.reference,
            "aggregation": "micro",
            "pooled": self.pooled.to_dict(),
            "per_fov": {k: v.to_dict() for k, v in sorted(self.per_fov.items())},
        }


def _check_ids(a: Mapping, b: Mapping, what: str):
    missing_a = sorted(set(b) - set(a))
    missing_b = sorted(set(a) - set(b))
    if missing_a or missing_b:
        raise ConfigError(f"{what}: identifier mismatch; missing predictions for "
                          f"{missing_a}, missing references for {missing_b}")


def evaluate_against_annotations(pred_masks: Mapping[str, np.ndarray],
                                 ref_masks: Mapping[str, np.ndarray],
                                 rois: Mapping[str, FOVRegion] | None = None,
                                 reference: str = "annotations") -> EvaluationResult:
    """Per-FOV reports plus a pooled report from summed counts (micro-average)."""
    _check_ids(pred_masks, ref_masks, "evaluate")
    if not pred_masks:
        raise ConfigError("no FOVs to evaluate")
    per_fov = {}
    total = ConfusionCounts()
    for fid in sorted(pred_masks):
        roi = rois.get(fid) if rois else None
        c = confusion(pred_masks[fid], ref_masks[fid], roi)
        per_fov[fid] = metrics(c, roi_id=fid)
        total = total + c
    return EvaluationResult(per_fov, metrics(total, roi_id="pooled", aggregation="micro"),
                            reference)


def compare_synthetic_vs_stained(seg_on_synthetic: Mapping[str, np.ndarray],
                                 seg_on_stained: Mapping[str, np.ndarray],
                                 rois: Mapping[str, FOVRegion] | None = None) -> EvaluationResult:
    """Per-slide agreement with the stained-CK segmentation taken as reference.

    The comparison is asymmetric: false positives are pixels segmented on
    synthetic CK but not on stained CK.
    """
    return evaluate_against_annotations(seg_on_synthetic, seg_on_stained, rois,
                                        reference="stained_ck_segmentation")


TABLE_ROWS = (
    ("stained_vs_annotations", "stained CK vs. annotations"),
    ("synthetic_vs_annotations", "synthetic CK vs. annotations"),
    ("synthetic_vs_stained", "synthetic CK vs. stained CK"),
)


def render_table(rows: Mapping[str, MetricsReport]) -> str:
    """Plain-text table: one line per row type, columns F1 / precision / sensitivity."""
    def fmt(v):
        return "  n/a " if v is None else f"{v:6.3f}"

    labels = dict(TABLE_ROWS)
    width = max(len(lbl) for lbl in labels.values())
    lines = [f"{'Test':<{width}}  {'F1':>6}  {'Prec':>6}  {'Sens':>6}"]
    for key, label in TABLE_ROWS:
        if key not in rows:
            continue
        r = rows[key]
        lines.append(f"{label:<{width}}  {fmt(r.f1)}  {fmt(r.precision)}  {fmt(r.sensitivity)}")
    return "\n".join(lines) + "\n"
