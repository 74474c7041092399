"""DAPI -> CK conditional translation network.

A U-Net generator trained against a conditional PatchGAN discriminator with a
least-squares adversarial term plus a weighted L1 reconstruction term.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import Checkpoint
from .data import load_patches
from .errors import ConfigError, TrainingDivergedError
from .phantom import Manifest, derive_seed
from .tiling import MODEL_RANGE, TILE_SIZE

log = logging.getLogger(__name__)


@dataclass
class GeneratorConfig:
    input_channels: int = 1
    output_channels: int = 1
    base_width: int = 16
    depth: int = 7
    max_width: int = 128
    output_range: tuple[float, float] = MODEL_RANGE

    def validate(self, patch_size: int = TILE_SIZE):
        self.output_range = tuple(self.output_range)
        if self.depth < 1 or patch_size % (2 ** self.depth):
            raise ConfigError(
                f"generator depth {self.depth} does not divide patch size {patch_size}",
                field="depth")
        if self.output_range[0] >= self.output_range[1]:
            raise ConfigError("output_range must be increasing", field="output_range")
        if min(self.input_channels, self.output_channels, self.base_width) < 1:
            raise ConfigError("channel counts must be >= 1")


@dataclass
class DiscriminatorConfig:
    input_channels: int = 2
    n_layers: int = 3
    base_width: int = 8

    def validate(self, patch_size: int = TILE_SIZE):
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1", field="n_layers")
        s = patch_grid_size(self, patch_size)
        if s <= 1:
            raise ConfigError(f"discriminator grid collapses to {s}x{s} on {patch_size} input",
                              field="n_layers")


@dataclass
class TrainConfig:
    lambda_l1: float = 100.0
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    batch_size: int = 8
    epochs: int = 12
    seed: int = 0
    patch_size: int = TILE_SIZE
    patches_per_sample: int = 4
    target_channel: str = "ck_stained"
    sampling_policy: str = "mask_balanced"
    log_path: str | None = None
    checkpoint_path: str | None = None

    def validate(self):
        if self.lambda_l1 < 0:
            raise ConfigError("lambda_l1 must be >= 0", field="lambda_l1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", field="batch_size")
        if self.patch_size != TILE_SIZE:
            raise ConfigError(f"patch_size is fixed at {TILE_SIZE}", field="patch_size")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0", field="epochs")
        if self.target_channel not in ("ck_true", "ck_stained"):
            raise ConfigError(f"unknown target_channel {self.target_channel!r}",
                              field="target_channel")


# ---------------------------------------------------------------------------
# networks


class UNetGenerator(nn.Module):
    """pix2pix-style U-Net: 4x4 stride-2 convs down, transposed convs up, skips between."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        config.validate(2 ** config.depth)
        self.config = config
        d = config.depth
        widths = [min(config.base_width * 2 ** i, config.max_width) for i in range(d)]
        self.down = nn.ModuleList()
        for i in range(d):
            cin = config.input_channels if i == 0 else widths[i - 1]
            layers = [] if i == 0 else [nn.LeakyReLU(0.2)]
            norm = 0 < i < d - 1
            layers.append(nn.Conv2d(cin, widths[i], 4, 2, 1, bias=not norm))
            if norm:
                layers.append(nn.BatchNorm2d(widths[i]))
            self.down.append(nn.Sequential(*layers))
        self.up = nn.ModuleList()
        for i in reversed(range(d)):
            cin = widths[i] if i == d - 1 else 2 * widths[i]
            cout = widths[i - 1] if i > 0 else config.output_channels
            norm = i > 0
            layers = [nn.ReLU(), nn.ConvTranspose2d(cin, cout, 4, 2, 1, bias=not norm)]
            if norm:
                layers.append(nn.BatchNorm2d(cout))
            self.up.append(nn.Sequential(*layers))

    def forward(self, x):
        k = 2 ** self.config.depth
        if x.shape[-1] % k or x.shape[-2] % k:
            raise ConfigError(f"input spatial dims {tuple(x.shape[-2:])} not divisible by {k}")
        skips = []
        h = x
        for layer in self.down:
            h = layer(h)
            skips.append(h)
        h = skips.pop()
        for j, layer in enumerate(self.up):
            if j:
                h = torch.cat([h, skips.pop()], dim=1)
            h = layer(h)
        lo, hi = self.config.output_range
        return lo + (hi - lo) * (torch.tanh(h) + 1) / 2


class PatchDiscriminator(nn.Module):
    """Conditional PatchGAN: ``n_layers`` strided blocks, one stride-1 block, 4x4 logit head."""

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        w = config.base_width
        layers = [nn.Conv2d(config.input_channels, w, 4, 2, 1), nn.LeakyReLU(0.2)]
        mult = 1
        for n in range(1, config.n_layers):
            prev, mult = mult, min(2 ** n, 8)
            layers += [nn.Conv2d(w * prev, w * mult, 4, 2, 1, bias=False),
                       nn.BatchNorm2d(w * mult), nn.LeakyReLU(0.2)]
        prev, mult = mult, min(2 ** config.n_layers, 8)
        layers += [nn.Conv2d(w * prev, w * mult, 4, 1, 1, bias=False),
                   nn.BatchNorm2d(w * mult), nn.LeakyReLU(0.2),
                   nn.Conv2d(w * mult, 1, 4, 1, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, dapi, ck):
        return self.net(torch.cat([dapi, ck], dim=1))


def conv_schedule(config: DiscriminatorConfig) -> list[tuple[int, int, int]]:
    """(kernel, stride, padding) of every conv in :class:`PatchDiscriminator`."""
    return [(4, 2, 1)] * config.n_layers + [(4, 1, 1), (4, 1, 1)]


def patch_grid_size(config: DiscriminatorConfig, input_size: int = TILE_SIZE) -> int:
    """Side length of the logit grid for a square input."""
    s = input_size
    for k, st, p in conv_schedule(config):
        s = (s + 2 * p - k) // st + 1
    return s


def receptive_field(config: DiscriminatorConfig) -> int:
    rf, jump = 1, 1
    for k, st, _ in conv_schedule(config):
        rf += (k - 1) * jump
        jump *= st
    return rf


# ---------------------------------------------------------------------------
# forward ops


def _as_batch(x, channels: int, size: int, what: str) -> tuple[torch.Tensor, bool]:
    t = torch.as_tensor(np.asarray(x, dtype=np.float32) if not torch.is_tensor(x) else x)
    single = t.ndim < 4
    if t.ndim == 2:
        t = t[None, None]
    elif t.ndim == 3:
        t = t[None]
    if t.ndim != 4 or t.shape[1] != channels or tuple(t.shape[-2:]) != (size, size):
        expected = (channels, size, size)
        raise ConfigError(f"{what}: expected shape {expected} (optionally batched), "
                          f"got {tuple(t.shape) if not single else tuple(t.shape[1:])}")
    return t.float(), single


def generator_forward(model: UNetGenerator | Checkpoint, dapi_patch,
                      patch_size: int = TILE_SIZE) -> np.ndarray:
    """Synthesize CK for one (1, P, P) patch or a batch (N, 1, P, P); eval mode, no grad."""
    if isinstance(model, Checkpoint):
        model = load_generator(model)
    x, single = _as_batch(dapi_patch, model.config.input_channels, patch_size,
                          "generator input")
    model.eval()
    with torch.no_grad():
        y = model(x).numpy()
    return y[0] if single else y


def discriminator_forward(model: PatchDiscriminator, dapi_patch, ck_patch,
                          patch_size: int = TILE_SIZE) -> np.ndarray:
    """Patch logit grid (S, S) for one pair, or (N, 1, S, S) for batches."""
    dapi, single = _as_batch(dapi_patch, 1, patch_size, "discriminator dapi")
    ck, single_ck = _as_batch(ck_patch, 1, patch_size, "discriminator ck")
    if dapi.shape != ck.shape:
        raise ConfigError(f"dapi {tuple(dapi.shape)} and ck {tuple(ck.shape)} differ")
    model.eval()
    with torch.no_grad():
        out = model(dapi, ck).numpy()
    return out[0, 0] if single else out


# ---------------------------------------------------------------------------
# losses


@dataclass
class GanLosses:
    g_loss: torch.Tensor
    d_loss: torch.Tensor
    adv: torch.Tensor
    l1: torch.Tensor
    fake: torch.Tensor

    def components(self) -> dict[str, float]:
        return {"g_loss": self.g_loss.item(), "d_loss": self.d_loss.item(),
                "adv": self.adv.item(), "l1": self.l1.item()}


def _lsgan(logits, target: float):
    return F.mse_loss(logits, torch.full_like(logits, target))


def gan_step_losses(dapi, ck_target, generator, discriminator, lambda_l1: float,
                    check_finite: bool = True) -> GanLosses:
    """Least-squares GAN losses for one batch.

    ``g_loss = adv + lambda_l1 * l1``; ``d_loss`` averages the real-pair and
    fake-pair terms, with the fake detached from the generator graph.
    """
    if lambda_l1 < 0:
        raise ConfigError("lambda_l1 must be >= 0", field="lambda_l1")
    if dapi.shape != ck_target.shape:
        raise ConfigError(f"pair shapes differ: {tuple(dapi.shape)} vs {tuple(ck_target.shape)}")
    fake = generator(dapi)
    adv = _lsgan(discriminator(dapi, fake), 1.0)
    l1 = (fake - ck_target).abs().mean()
    g_loss = adv + lambda_l1 * l1
    d_real = _lsgan(discriminator(dapi, ck_target), 1.0)
    d_fake = _lsgan(discriminator(dapi, fake.detach()), 0.0)
    d_loss = 0.5 * (d_real + d_fake)
    if check_finite:
        for name, value in (("adv", adv), ("l1", l1), ("g_loss", g_loss), ("d_loss", d_loss)):
            if not torch.isfinite(value).all():
                raise TrainingDivergedError(name)
    return GanLosses(g_loss, d_loss, adv, l1, fake)


# ---------------------------------------------------------------------------
# training


def build_models(gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, seed: int):
    torch.manual_seed(seed)
    return UNetGenerator(gen_cfg), PatchDiscriminator(disc_cfg)


def mean_abs_error(generator: nn.Module, dapi: np.ndarray, target: np.ndarray,
                   batch_size: int = 16) -> float:
    generator.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(dapi), batch_size):
            x = torch.from_numpy(dapi[i:i + batch_size])
            y = torch.from_numpy(target[i:i + batch_size])
            total += (generator(x) - y).abs().sum(dtype=torch.float64).item()
            count += y.numel()
    return total / count


def load_generator(ckpt: Checkpoint | str | Path, which: str = "generator") -> UNetGenerator:
    if not isinstance(ckpt, Checkpoint):
        ckpt = Checkpoint.load(ckpt)
    if ckpt.kind != "dapi2ck":
        raise ConfigError(f"expected a dapi2ck checkpoint, got kind={ckpt.kind!r}", field="kind")
    model = UNetGenerator(GeneratorConfig(**ckpt.configs["generator"]))
    model.load_state_dict(ckpt.parameters[which])
    return model.eval()


def _clone_state(module: nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _write_log_line(path, record: dict, truncate: bool):
    if not path:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w" if truncate else "a") as fh:
        fh.write(json.dumps(record) + "\n")


def train_dapi2ck(manifest: Manifest, train_config: TrainConfig,
                  generator_config: GeneratorConfig | None = None,
                  discriminator_config: DiscriminatorConfig | None = None,
                  resume_from: str | Path | Checkpoint | None = None) -> Checkpoint:
    """Adversarial + L1 training on the manifest's train split.

    Each epoch appends a record with ``g_loss``, ``d_loss``, ``adv``, ``l1``
    (epoch means) and ``val_l1``. The returned checkpoint stores the
    best-val_l1 weights; ``resume`` holds last-epoch weights and optimizer
    state. With ``checkpoint_path`` set, the checkpoint is rewritten after every
    epoch, so a divergence leaves the last finite epoch on disk.
    """
    cfg = train_config
    cfg.validate()
    gen_cfg = generator_config or GeneratorConfig()
    disc_cfg = discriminator_config or DiscriminatorConfig()
    gen_cfg.validate(cfg.patch_size)
    disc_cfg.validate(cfg.patch_size)

    train = load_patches(manifest, "train", cfg.patches_per_sample, cfg.sampling_policy)
    val = load_patches(manifest, "val", cfg.patches_per_sample, cfg.sampling_policy)
    x_train, y_train = train["dapi"], train[cfg.target_channel]
    x_val, y_val = val["dapi"], val[cfg.target_channel]

    G, D = build_models(gen_cfg, disc_cfg, cfg.seed)
    opt_g = torch.optim.Adam(G.parameters(), lr=cfg.learning_rate, betas=(cfg.adam_beta1, 0.999))
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.learning_rate, betas=(cfg.adam_beta1, 0.999))

    history: list[dict] = []
    best_val = math.inf
    best_params = {"generator": _clone_state(G), "discriminator": _clone_state(D)}
    start = 0
    if resume_from is not None:
        prev = resume_from if isinstance(resume_from, Checkpoint) else Checkpoint.load(resume_from)
        r = prev.resume
        G.load_state_dict(r["generator"])
        D.load_state_dict(r["discriminator"])
        opt_g.load_state_dict(r["opt_g"])
        opt_d.load_state_dict(r["opt_d"])
        start = int(r["epoch"])
        history = list(prev.training_log)
        best_params = prev.parameters
        best_val = min((h["val_l1"] for h in history), default=math.inf)

    configs = {"generator": asdict(gen_cfg), "discriminator": asdict(disc_cfg),
               "train": asdict(cfg)}
    ckpt = None

    def snapshot(epoch):
        return Checkpoint(
            kind="dapi2ck", parameters=best_params, configs=configs,
            training_log=list(history),
            resume={"generator": _clone_state(G), "discriminator": _clone_state(D),
                    "opt_g": opt_g.state_dict(), "opt_d": opt_d.state_dict(), "epoch": epoch})

    g_params, d_params = list(G.parameters()), list(D.parameters())
    n = len(x_train)
    for epoch in range(start, cfg.epochs):
        G.train()
        D.train()
        order = np.random.default_rng(derive_seed(cfg.seed, epoch)).permutation(n)
        sums = {"g_loss": 0.0, "d_loss": 0.0, "adv": 0.0, "l1": 0.0}
        steps = 0
        try:
            for i in range(0, n, cfg.batch_size):
                idx = order[i:i + cfg.batch_size]
                x = torch.from_numpy(x_train[idx])
                y = torch.from_numpy(y_train[idx])
                losses = gan_step_losses(x, y, G, D, cfg.lambda_l1)
                g_grads = torch.autograd.grad(losses.g_loss, g_params)
                d_grads = torch.autograd.grad(losses.d_loss, d_params)
                for p, g in zip(g_params, g_grads):
                    p.grad = g
                for p, g in zip(d_params, d_grads):
                    p.grad = g
                opt_g.step()
                opt_d.step()
                for k, v in losses.components().items():
                    sums[k] += v
                steps += 1
            val_l1 = mean_abs_error(G, x_val, y_val)
            if not math.isfinite(val_l1):
                raise TrainingDivergedError("val_l1")
        except TrainingDivergedError as err:
            err.epoch = epoch + 1
            err.checkpoint = ckpt
            log.error("training diverged at epoch %d (%s)", epoch + 1, err.component)
            raise
        record = {"epoch": epoch + 1, **{k: v / steps for k, v in sums.items()},
                  "val_l1": val_l1}
        history.append(record)
        log.info("dapi2ck epoch %d %s", epoch + 1, record)
        _write_log_line(cfg.log_path, record, truncate=(epoch == 0 and resume_from is None))
        if val_l1 < best_val:
            best_val = val_l1
            best_params = {"generator": _clone_state(G), "discriminator": _clone_state(D)}
        ckpt = snapshot(epoch + 1)
        if cfg.checkpoint_path:
            ckpt.save(cfg.checkpoint_path)
    if ckpt is None:
        ckpt = snapshot(start)
        if cfg.checkpoint_path:
            ckpt.save(cfg.checkpoint_path)
    return ckpt
