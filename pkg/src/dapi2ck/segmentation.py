"""Epithelium segmentation from a CK channel (stained or synthetic)."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import Checkpoint
from .data import load_patches
from .errors import ConfigError, TrainingDivergedError
from .evaluation import confusion, metrics
from .phantom import Manifest, derive_seed
from .tiling import TILE_SIZE
from .translation import _as_batch, _clone_state, _write_log_line, load_generator

log = logging.getLogger(__name__)

CHANNEL_SELECTORS = ("ck_true", "ck_stained", "synthetic_from_checkpoint")
LOSS_KINDS = ("cross_entropy", "dice", "combined")


@dataclass
class SegConfig:
    input_channels: int = 1
    base_width: int = 8
    depth: int = 5
    loss_kind: str = "combined"
    threshold: float = 0.5
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 6
    seed: int = 0
    patches_per_sample: int = 4
    sampling_policy: str = "mask_balanced"
    augment: bool = True  # random gain / background offset / noise on training inputs
    log_path: str | None = None
    checkpoint_path: str | None = None

    def validate(self, patch_size: int = TILE_SIZE):
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}",
                              field="threshold")
        if self.depth < 1 or patch_size % (2 ** self.depth):
            raise ConfigError(f"depth {self.depth} does not divide patch size {patch_size}",
                              field="depth")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss_kind {self.loss_kind!r}", field="loss_kind")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", field="batch_size")


def _double_conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(),
    )


class SegUNet(nn.Module):
    """Classic U-Net; ``depth`` resolution levels, logits out."""

    def __init__(self, config: SegConfig):
        super().__init__()
        self.config = config
        widths = [config.base_width * 2 ** i for i in range(config.depth)]
        self.enc = nn.ModuleList()
        cin = config.input_channels
        for w in widths:
            self.enc.append(_double_conv(cin, w))
            cin = w
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.up.append(nn.ConvTranspose2d(cin, w, 2, stride=2))
            self.dec.append(_double_conv(2 * w, w))
            cin = w
        self.head = nn.Conv2d(cin, 1, 1)

    def forward(self, x):
        skips = []
        h = x
        for i, block in enumerate(self.enc):
            if i:
                h = F.max_pool2d(h, 2)
            h = block(h)
            skips.append(h)
        skips.pop()
        for up, dec in zip(self.up, self.dec):
            h = dec(torch.cat([up(h), skips.pop()], dim=1))
        return self.head(h)


def seg_forward(model: SegUNet | Checkpoint, ck_patch, patch_size: int = TILE_SIZE) -> np.ndarray:
    """Probability map for one (1, P, P) patch or a batch (N, 1, P, P)."""
    if isinstance(model, Checkpoint):
        model = load_segmenter(model)
    x, single = _as_batch(ck_patch, model.config.input_channels, patch_size, "segmenter input")
    model.eval()
    with torch.no_grad():
        p = torch.sigmoid(model(x)).numpy()
    return p[0] if single else p


def binarize(probability_map, threshold: float) -> np.ndarray:
    """``mask = probability >= threshold`` (inclusive boundary)."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must be in (0, 1), got {threshold}", field="threshold")
    return np.asarray(probability_map) >= threshold


# ---------------------------------------------------------------------------
# losses


def dice_loss(prob: torch.Tensor, target: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    inter = (prob * target).sum()
    return 1.0 - (2.0 * inter + eps) / (prob.sum() + target.sum() + eps)


def seg_loss(logits: torch.Tensor, target: torch.Tensor, kind: str = "combined") -> torch.Tensor:
    if kind == "cross_entropy":
        return F.binary_cross_entropy_with_logits(logits, target)
    if kind == "dice":
        return dice_loss(torch.sigmoid(logits), target)
    if kind == "combined":
        return (F.binary_cross_entropy_with_logits(logits, target)
                + dice_loss(torch.sigmoid(logits), target))
    raise ConfigError(f"unknown loss_kind {kind!r}", field="loss_kind")


# ---------------------------------------------------------------------------
# training


def load_segmenter(ckpt: Checkpoint | str | Path) -> SegUNet:
    if not isinstance(ckpt, Checkpoint):
        ckpt = Checkpoint.load(ckpt)
    if ckpt.kind != "segmentation":
        raise ConfigError(f"expected a segmentation checkpoint, got kind={ckpt.kind!r}",
                          field="kind")
    model = SegUNet(SegConfig(**ckpt.configs["segmentation"]))
    model.load_state_dict(ckpt.parameters["segmenter"])
    return model.eval()


def synthesize_ck(generator: nn.Module, dapi: np.ndarray, batch_size: int = 16) -> np.ndarray:
    generator.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(dapi), batch_size):
            out.append(generator(torch.from_numpy(dapi[i:i + batch_size])).numpy())
    return np.concatenate(out).astype(np.float32)


def training_inputs(manifest: Manifest, split: str, config: SegConfig, channel_selector: str,
                    dapi2ck_checkpoint=None) -> tuple[np.ndarray, np.ndarray]:
    """(CK inputs, masks) for ``split`` under the chosen channel."""
    if channel_selector not in CHANNEL_SELECTORS:
        raise ConfigError(f"unknown channel_selector {channel_selector!r}",
                          field="channel_selector")
    data = load_patches(manifest, split, config.patches_per_sample, config.sampling_policy)
    if channel_selector == "synthetic_from_checkpoint":
        x = synthesize_ck(load_generator(dapi2ck_checkpoint), data["dapi"])
    else:
        x = data[channel_selector]
    return x, data["mask"]


def augment_intensity(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Per-patch intensity jitter for CK inputs on the [-1, 1] model scale.

    Signal above zero counts is scaled by a gain in [0.75, 1.25], the background is
    shifted by [-0.02, 0.15] and Gaussian noise with sigma in [0, 0.03] is added,
    so the segmenter does not key on the exact background level of one CK source.
    """
    n = len(x)
    shape = (n,) + (1,) * (x.ndim - 1)
    gain = rng.uniform(0.75, 1.25, n).reshape(shape)
    offset = rng.uniform(-0.02, 0.15, n).reshape(shape)
    sigma = rng.uniform(0.0, 0.03, n).reshape(shape)
    out = -1.0 + gain * (x + 1.0) + offset + sigma * rng.standard_normal(x.shape)
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def predict_proba(model: SegUNet, x: np.ndarray, batch_size: int = 16) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(torch.sigmoid(model(torch.from_numpy(x[i:i + batch_size]))).numpy())
    return np.concatenate(out)


def train_segmentation(manifest: Manifest, seg_config: SegConfig,
                       channel_selector: str = "ck_true",
                       dapi2ck_checkpoint: str | Path | Checkpoint | None = None,
                       resume_from: str | Path | Checkpoint | None = None) -> Checkpoint:
    """Train on the manifest's train split; keep the best-val-F1 weights.

    Each epoch logs the mean training loss and the pooled pixel F1 on the val
    split at ``seg_config.threshold``.
    """
    cfg = seg_config
    cfg.validate()
    if channel_selector == "synthetic_from_checkpoint" and dapi2ck_checkpoint is None:
        raise ConfigError("channel_selector synthetic_from_checkpoint needs dapi2ck_checkpoint",
                          field="dapi2ck_checkpoint")
    x_train, y_train = training_inputs(manifest, "train", cfg, channel_selector,
                                       dapi2ck_checkpoint)
    x_val, y_val = training_inputs(manifest, "val", cfg, channel_selector, dapi2ck_checkpoint)

    torch.manual_seed(cfg.seed)
    model = SegUNet(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    history: list[dict] = []
    best_f1 = -math.inf
    best = _clone_state(model)
    start = 0
    if resume_from is not None:
        prev = resume_from if isinstance(resume_from, Checkpoint) else Checkpoint.load(resume_from)
        model.load_state_dict(prev.resume["segmenter"])
        opt.load_state_dict(prev.resume["opt"])
        start = int(prev.resume["epoch"])
        history = list(prev.training_log)
        best = prev.parameters["segmenter"]
        best_f1 = max((h["val_f1"] if h["val_f1"] is not None else -1.0 for h in history),
                      default=-math.inf)

    configs = {"segmentation": asdict(cfg), "channel_selector": channel_selector}
    ckpt = None

    def snapshot(epoch):
        return Checkpoint(kind="segmentation", parameters={"segmenter": best}, configs=configs,
                          training_log=list(history),
                          resume={"segmenter": _clone_state(model), "opt": opt.state_dict(),
                                  "epoch": epoch})

    n = len(x_train)
    for epoch in range(start, cfg.epochs):
        model.train()
        epoch_rng = np.random.default_rng(derive_seed(cfg.seed, epoch))
        order = epoch_rng.permutation(n)
        total, steps = 0.0, 0
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            xb = augment_intensity(x_train[idx], epoch_rng) if cfg.augment else x_train[idx]
            logits = model(torch.from_numpy(xb))
            loss = seg_loss(logits, torch.from_numpy(y_train[idx]), cfg.loss_kind)
            if not torch.isfinite(loss):
                raise TrainingDivergedError("seg_loss", epoch + 1, ckpt)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            steps += 1
        pred = binarize(predict_proba(model, x_val), cfg.threshold)
        val_f1 = metrics(confusion(pred, y_val > 0.5)).f1
        record = {"epoch": epoch + 1, "train_loss": total / steps, "val_f1": val_f1}
        history.append(record)
        log.info("segmentation epoch %d %s", epoch + 1, record)
        _write_log_line(cfg.log_path, record, truncate=(epoch == 0 and resume_from is None))
        if val_f1 is not None and val_f1 > best_f1:
            best_f1 = val_f1
            best = _clone_state(model)
        ckpt = snapshot(epoch + 1)
        if cfg.checkpoint_path:
            ckpt.save(cfg.checkpoint_path)
    if ckpt is None:
        ckpt = snapshot(start)
        if cfg.checkpoint_path:
            ckpt.save(cfg.checkpoint_path)
    return ckpt
