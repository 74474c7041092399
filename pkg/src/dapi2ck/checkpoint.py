"""Self-describing checkpoint container shared by both networks.

A checkpoint is a ``torch.save`` zip holding plain dicts: weights as tensors,
configs as JSON-able dicts, the per-epoch training log and a format version.
It loads with ``weights_only=True``.
"""
from __future__ import annotations

import hashlib
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .errors import ConfigError
from .raster import atomic_path

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    kind: str  # "dapi2ck" or "segmentation"
    parameters: dict  # network name -> state_dict
    configs: dict  # config name -> dict
    training_log: list = field(default_factory=list)
    resume: dict = field(default_factory=dict)  # last-epoch states for continuing
    format_version: int = FORMAT_VERSION

    def to_payload(self) -> dict:
        return {
            "format_version": self.format_version,
            "kind": self.kind,
            "parameters": self.parameters,
            "configs": self.configs,
            "training_log": self.training_log,
            "resume": self.resume,
        }

    def save(self, path) -> Path:
        path = Path(path)
        with atomic_path(path) as tmp:
            torch.save(self.to_payload(), tmp)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"checkpoint not found: {path}", path=str(path))
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
        except (pickle.UnpicklingError, RuntimeError, EOFError) as exc:
            raise ConfigError(f"not a readable checkpoint: {path} ({exc.__class__.__name__})",
                              path=str(path)) from exc
        if not isinstance(payload, dict):
            raise ConfigError(f"not a checkpoint container: {path}", path=str(path))
        version = int(payload.get("format_version", -1))
        if version != FORMAT_VERSION:
            raise ConfigError(f"unsupported checkpoint format_version {version}", path=str(path))
        return cls(
            kind=payload["kind"],
            parameters=payload["parameters"],
            configs=payload["configs"],
            training_log=list(payload.get("training_log", [])),
            resume=payload.get("resume", {}),
            format_version=version,
        )

    def fingerprint(self) -> str:
        """Short content hash of the stored weights, used as an identifier in sidecars."""
        h = hashlib.sha256()
        for net in sorted(self.parameters):
            for name, tensor in sorted(self.parameters[net].items()):
                h.update(f"{net}.{name}".encode())
                h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()[:16]
