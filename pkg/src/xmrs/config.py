from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import FrozenSet, Iterable, Tuple

from .dataset import ConfigurationError

__all__ = ["ABLATIONS", "CONTRASTIVE_VARIANTS", "ModelConfig", "ablate", "load_config"]

ABLATIONS = ("no_mmg", "no_smg", "no_mcae", "no_scae")
CONTRASTIVE_VARIANTS = ("ccrl", "infonce", "none")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    d_shared: int = 128
    prompt_len: int = 128
    gamma: float = 50.0
    lam: float = 0.001
    batch_size: int = 8
    learning_rate: float = 1e-5
    epochs: int = 50
    contrastive_variant: str = "ccrl"
    ablations: FrozenSet[str] = field(default_factory=frozenset)
    seed: int = 0
    ffn_mult: int = 4
    n_heads: int = 1
    temperature: float = 0.07
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 1.0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "ablations", frozenset(self.ablations))
        object.__setattr__(self, "betas", tuple(self.betas))
        self.validate()

    def validate(self) -> None:
        for name in ("d_model", "d_shared", "prompt_len", "ffn_mult", "n_heads", "epochs"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for name in ("gamma", "learning_rate", "temperature"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("lam", "weight_decay", "grad_clip"):
            if not getattr(self, name) >= 0:
                raise ConfigurationError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.contrastive_variant not in CONTRASTIVE_VARIANTS:
            raise ConfigurationError(
                f"contrastive_variant must be one of {CONTRASTIVE_VARIANTS}, got {self.contrastive_variant!r}"
            )
        unknown = sorted(set(self.ablations) - set(ABLATIONS))
        if unknown:
            raise ConfigurationError(f"unknown ablation flag(s) {unknown}; known: {list(ABLATIONS)}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ablations"] = sorted(self.ablations)
        d["betas"] = list(self.betas)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigurationError(f"unknown config field(s) {unknown}")
        if isinstance(d.get("ablations"), str):
            d["ablations"] = [a for a in d["ablations"].split(",") if a]
        return cls(**d)

    def has(self, flag: str) -> bool:
        return flag in self.ablations


def ablate(config: ModelConfig, flags: Iterable[str]) -> ModelConfig:
    flags = set(flags)
    unknown = sorted(flags - set(ABLATIONS))
    if unknown:
        raise ConfigurationError(f"unknown ablation flag(s) {unknown}; known: {list(ABLATIONS)}")
    if not flags:
        return config
    return config.replace(ablations=config.ablations | flags)


def load_config(path) -> ModelConfig:
    with open(Path(path)) as fh:
        return ModelConfig.from_dict(json.load(fh))
