"""Experiment configuration: one YAML document with dotted command-line overrides."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .phantom import PhantomSpec
from .segmentation import CHANNEL_SELECTORS, SegConfig
from .tiling import BLENDS
from .translation import DiscriminatorConfig, GeneratorConfig, TrainConfig


@dataclass
class DatasetConfig:
    n_samples: int = 160
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    workers: int = 1


@dataclass
class TranslationConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class SegmentationSection:
    config: SegConfig = field(default_factory=SegConfig)
    channel_selector: str = "ck_true"
    dapi2ck_checkpoint: str | None = None


@dataclass
class PipelineConfig:
    stride: int = 128
    blend: str = "cosine_ramp"
    threshold: float | None = None  # None -> segmenter's own threshold
    batch_size: int = 8


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    translation: TranslationConfig = field(default_factory=TranslationConfig)
    segmentation: SegmentationSection = field(default_factory=SegmentationSection)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def resolve(self) -> "ExperimentConfig":
        """Propagate the master seed and validate every section."""
        self.phantom.seed = self.seed
        self.translation.train.seed = self.seed
        self.segmentation.config.seed = self.seed
        self.phantom.validate()
        self.translation.generator.validate()
        self.translation.discriminator.validate()
        self.translation.train.validate()
        self.segmentation.config.validate()
        if self.segmentation.channel_selector not in CHANNEL_SELECTORS:
            raise ConfigError(f"unknown channel_selector {self.segmentation.channel_selector!r}",
                              field="segmentation.channel_selector")
        if self.pipeline.blend not in BLENDS:
            raise ConfigError(f"unknown blend {self.pipeline.blend!r}", field="pipeline.blend")
        if not 1 <= self.pipeline.stride <= 256:
            raise ConfigError("pipeline.stride must be in [1, 256]", field="pipeline.stride")
        thr = self.pipeline.threshold
        if thr is not None and not 0 < thr < 1:
            raise ConfigError("pipeline.threshold must be in (0, 1)", field="pipeline.threshold")
        if self.dataset.n_samples < 1:
            raise ConfigError("dataset.n_samples must be >= 1", field="dataset.n_samples")
        return self

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: Any, path: str):
    """Recursively construct dataclass ``cls`` from a dict, rejecting unknown keys."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping", field=path)
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {path or 'config'}: {sorted(unknown)}", field=path)
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        sub = f"{path}.{name}" if path else name
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, sub)
        else:
            kwargs[name] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad value in {path or 'config'}: {exc}", field=path) from exc


def _set_dotted(data: dict, key: str, value):
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-mapping", field=key)
    node[parts[-1]] = value


def load_config(path: str | Path | None = None, overrides: dict | None = None,
                set_args: list[str] | None = None) -> ExperimentConfig:
    """Read YAML (if any), apply ``key.path=value`` overrides, build and resolve."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}", path=str(p))
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}", path=str(p)) from exc
    for item in set_args or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set_dotted(data, key.strip(), yaml.safe_load(raw))
    for key, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(data, key, value)
    return _build(ExperimentConfig, data, "").resolve()


def dump_config(config: ExperimentConfig, extra: dict | None = None) -> str:
    doc = config.to_dict()
    if extra:
        doc["command"] = _plain(extra)
    return yaml.safe_dump(doc, sort_keys=False)
