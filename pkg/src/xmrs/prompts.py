"""Hierarchical prompts and prompt-driven reference-context generation.

Two families of continuous prompts, one matrix per modality each:
modality-level prompts drive generation from the sample's own modalities,
sample-level prompts drive generation from retrieved positive samples. A
context for target modality ``m`` is

    agg_m([P_m ; proj_{t->m}(x_t) ; proj_{v->m}(x_v) ; proj_{a->m}(x_a)])

with concatenation along the sequence axis, tokenwise affine projections and
a tokenwise affine + tanh aggregator.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Optional

import torch
from torch import Tensor, nn

from .dataset import MODALITIES, Modality

__all__ = [
    "LEVELS",
    "NEGATIVE_SLOPE",
    "GAIN_CONSTANT",
    "prompt_bound",
    "PromptBank",
    "init_prompt_bank",
    "ContextGenerator",
    "ReferenceContext",
    "generate_modality_context",
    "generate_sample_context",
]

LEVELS = ("modality", "sample")
NEGATIVE_SLOPE = 5.0
GAIN_CONSTANT = 6.0


def prompt_bound(fan_in: int, a: float = NEGATIVE_SLOPE, b: float = GAIN_CONSTANT) -> float:
    """Half-width of the uniform prompt initialisation, sqrt(b / ((1 + a^2) fan_in))."""
    return math.sqrt(b / ((1.0 + a * a) * fan_in))


def _key(level: str, m: Modality) -> str:
    return f"{level}_{Modality(m).value}"


class PromptBank(nn.Module):
    """Trainable (p_len, d_model) prompt per (level, modality)."""

    def __init__(self, p_len: int, d_model: int, levels: Iterable[str] = LEVELS):
        super().__init__()
        if p_len < 1 or d_model < 1:
            raise ValueError(f"p_len and d_model must be >= 1, got {p_len}, {d_model}")
        self.p_len, self.d_model = p_len, d_model
        self.levels = tuple(levels)
        for lvl in self.levels:
            if lvl not in LEVELS:
                raise ValueError(f"unknown prompt level {lvl!r}")
        self.prompts = nn.ParameterDict(
            {_key(lvl, m): nn.Parameter(torch.empty(p_len, d_model)) for lvl in self.levels for m in MODALITIES}
        )

    @property
    def bound(self) -> float:
        return prompt_bound(self.d_model)

    @torch.no_grad()
    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        beta = self.bound
        for key in sorted(self.prompts):
            p = self.prompts[key]
            p.copy_(torch.rand(p.shape, generator=generator, dtype=p.dtype) * (2 * beta) - beta)

    def get(self, level: str, modality: Modality) -> Tensor:
        return self.prompts[_key(level, modality)]

    def modality_prompts(self) -> Dict[Modality, Tensor]:
        return {m: self.get("modality", m) for m in MODALITIES}

    def sample_prompts(self) -> Dict[Modality, Tensor]:
        return {m: self.get("sample", m) for m in MODALITIES}


def init_prompt_bank(p_len: int, d_model: int, seed: int, levels: Iterable[str] = LEVELS) -> PromptBank:
    bank = PromptBank(p_len, d_model, levels)
    bank.reset_parameters(torch.Generator().manual_seed(seed))
    return bank


class ContextGenerator(nn.Module):
    """Parameters of one level: nine source->target projections and three aggregators."""

    def __init__(self, level: str, native_dims: Mapping[Modality, int], d_model: int):
        super().__init__()
        if level not in LEVELS:
            raise ValueError(f"unknown level {level!r}")
        self.level, self.d_model = level, d_model
        self.proj = nn.ModuleDict(
            {
                f"{src.short}2{dst.short}": nn.Linear(native_dims[src], d_model)
                for dst in MODALITIES
                for src in MODALITIES
            }
        )
        self.agg = nn.ModuleDict({m.short: nn.Linear(d_model, d_model) for m in MODALITIES})

    def project(self, src: Modality, dst: Modality, x: Tensor) -> Tensor:
        return self.proj[f"{Modality(src).short}2{Modality(dst).short}"](x)

    def forward(self, target: Modality, sources: Mapping[Modality, Tensor], prompt: Tensor) -> Tensor:
        """``sources[m]``: (..., L_m, d_m); ``prompt``: (P, d_model) -> (..., P + sum L_m, d_model)."""
        target = Modality(target)
        missing = [m.value for m in MODALITIES if m not in sources]
        if missing:
            raise ValueError(f"missing source modalities for {self.level}-level context: {missing}")
        parts = [self.project(src, target, sources[src]) for src in MODALITIES]
        lead = parts[0].shape[:-2]
        parts.insert(0, prompt.expand(*lead, *prompt.shape))
        return torch.tanh(self.agg[target.short](torch.cat(parts, dim=-2)))


@dataclass(frozen=True)
class ReferenceContext:
    level: str
    target: Modality
    context: Tensor


def generate_modality_context(
    target: Modality,
    sample_features: Mapping[Modality, Tensor],
    bank: PromptBank,
    params: ContextGenerator,
) -> ReferenceContext:
    if params.level != "modality":
        raise ValueError("modality-level context needs modality-level generator parameters")
    ctx = params(target, sample_features, bank.get("modality", target))
    return ReferenceContext("modality", Modality(target), ctx)


def generate_sample_context(
    target: Modality,
    retrieved_positives: Mapping[Modality, Tensor],
    bank: PromptBank,
    params: ContextGenerator,
) -> ReferenceContext:
    """``retrieved_positives[beta]`` is the beta-modality sequence of the positive
    retrieved for this target modality."""
    if params.level != "sample":
        raise ValueError("sample-level context needs sample-level generator parameters")
    ctx = params(target, retrieved_positives, bank.get("sample", target))
    return ReferenceContext("sample", Modality(target), ctx)
