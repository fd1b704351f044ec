"""Experiment configuration: one flat record owning every hyperparameter.

JSON config files use exactly these field names; CLI flags override file
values and the effective config is echoed into each run manifest.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import GammaOutOfRangeError, LambdaOutOfRangeError


@dataclass
class ExperimentConfig:
    gamma: float = 0.1
    lam: float = 0.1
    n_iters: int = 500
    z_dim: int = 32
    epochs: int = 20
    batch_size: int = 32
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    seed: int = 0
    gen_hidden: list[int] = field(default_factory=lambda: [128, 256])
    disc_hidden: list[int] = field(default_factory=lambda: [256, 128])
    g_loss: str = "nonsaturating"   # or "literal"
    # latent-search options
    search_lr: float = 0.05
    step_rule: str = "adam"         # or "gd"
    restarts: int = 1
    best_iterate: bool = True
    # dataset spec as written by `prepare` (kind, paths, normal_class, ...)
    dataset: dict | None = None

    def validate(self):
        if not (0.0 < self.gamma <= 1.0):
            raise GammaOutOfRangeError(f"gamma must be in (0, 1], got {self.gamma}")
        if not (0.0 <= self.lam <= 1.0):
            raise LambdaOutOfRangeError(f"lam must be in [0, 1], got {self.lam}")
        if self.n_iters < 1:
            raise ValueError(f"n_iters must be >= 1, got {self.n_iters}")
        if self.z_dim < 1:
            raise ValueError(f"z_dim must be >= 1, got {self.z_dim}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.g_loss not in ("nonsaturating", "literal"):
            raise ValueError(f"unknown g_loss {self.g_loss!r}")
        if self.step_rule not in ("adam", "gd"):
            raise ValueError(f"unknown step_rule {self.step_rule!r}")
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data).validate()

    def replaced(self, **overrides) -> "ExperimentConfig":
        return dataclasses.replace(self, **overrides).validate()

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


def canonical_json(obj) -> str:
    """Stable serialization used for hashing and byte-identical outputs."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))
