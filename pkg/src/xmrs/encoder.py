"""Cross-modal retrieval-augmented encoder and fusion head.

Each target stream is self-attended, then enhanced by cross-attention in which
the target supplies queries and a reference context supplies keys and values::

    y0 = softmax((W_q x)(W_k c)^T / sqrt(d)) (W_v c) + x
    y  = FFN(LN(y0)) + y0

There is one such block per (context level, target modality). No positional
encodings are used.
"""
from __future__ import annotations

import math
from typing import Mapping, Optional, Sequence, Tuple

import torch
from torch import Tensor, nn
import torch.nn.functional as F

from .dataset import MODALITIES, Modality
from .prompts import ReferenceContext

__all__ = [
    "STREAM_ORDER",
    "attention",
    "SelfAttention",
    "CrossAugment",
    "FusionHead",
    "self_attend",
    "cross_augment",
    "fuse_and_predict",
]

# Fusion concatenation order: t_m, v_m, a_m, t_s, v_s, a_s.
STREAM_ORDER: Tuple[Tuple[str, Modality], ...] = tuple(
    (level, m) for level in ("modality", "sample") for m in MODALITIES
)


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int = 1) -> Tuple[Tensor, Tensor]:
    """Scaled dot-product attention over the last two axes.

    Returns the attended values and the attention weights, shaped
    (..., heads, Lq, Lk). With ``n_heads > 1`` the model dimension is split
    evenly across heads and the scale uses the per-head width.
    """
    d = q.shape[-1]
    if n_heads == 1:
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
        return w @ v, w.unsqueeze(-3)
    if d % n_heads:
        raise ValueError(f"d_model {d} not divisible by {n_heads} heads")
    hd = d // n_heads

    def split(x):
        return x.reshape(*x.shape[:-1], n_heads, hd).transpose(-2, -3)

    w = torch.softmax(split(q) @ split(k).transpose(-1, -2) / math.sqrt(hd), dim=-1)
    out = (w @ split(v)).transpose(-2, -3)
    return out.reshape(*out.shape[:-2], d), w


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int = 1):
        super().__init__()
        self.n_heads = n_heads
        self.w_q = nn.Linear(d_model, d_model)
        self.w_k = nn.Linear(d_model, d_model)
        self.w_v = nn.Linear(d_model, d_model)

    def forward(self, x: Tensor, return_weights: bool = False):
        out, w = attention(self.w_q(x), self.w_k(x), self.w_v(x), self.n_heads)
        y = out + x
        return (y, w) if return_weights else y


class CrossAugment(nn.Module):
    """Cross-attention from a target stream onto a reference context, residual,
    then a post-norm feed-forward sub-block with its own residual."""

    def __init__(self, d_model: int, ffn_mult: int = 4, n_heads: int = 1):
        super().__init__()
        self.d_model, self.n_heads = d_model, n_heads
        self.w_q = nn.Linear(d_model, d_model)
        self.w_k = nn.Linear(d_model, d_model)
        self.w_v = nn.Linear(d_model, d_model)
        self.norm = nn.LayerNorm(d_model)
        self.ffn_in = nn.Linear(d_model, ffn_mult * d_model)
        self.ffn_out = nn.Linear(ffn_mult * d_model, d_model)

    def ffn(self, x: Tensor) -> Tensor:
        return self.ffn_out(F.gelu(self.ffn_in(x)))

    def forward(self, target: Tensor, context: Tensor, return_weights: bool = False):
        if target.shape[-1] != self.d_model or context.shape[-1] != self.d_model:
            raise ValueError(
                f"expected d_model={self.d_model}, got target {tuple(target.shape)}, context {tuple(context.shape)}"
            )
        out, w = attention(self.w_q(target), self.w_k(context), self.w_v(context), self.n_heads)
        y0 = out + target
        y = self.ffn(self.norm(y0)) + y0
        return (y, w) if return_weights else y


class FusionHead(nn.Module):
    """Mean-pool six enhanced streams, concatenate, two-layer tanh MLP -> scalar."""

    def __init__(self, d_model: int, hidden: Optional[int] = None):
        super().__init__()
        hidden = hidden or d_model
        self.fc1 = nn.Linear(len(STREAM_ORDER) * d_model, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, streams: Sequence[Tensor]) -> Tensor:
        """``streams``: six (..., L, d_model) tensors in STREAM_ORDER -> (...,)."""
        if len(streams) != len(STREAM_ORDER):
            raise ValueError(f"expected {len(STREAM_ORDER)} streams, got {len(streams)}")
        pooled = torch.cat([s.mean(dim=-2) for s in streams], dim=-1)
        return self.fc2(torch.tanh(self.fc1(pooled))).squeeze(-1)


def self_attend(x: Tensor, params: SelfAttention) -> Tensor:
    return params(x)


def cross_augment(target: Tensor, context, params: CrossAugment, level: Optional[str] = None) -> Tensor:
    """``context`` may be a raw tensor or a :class:`ReferenceContext`; when both
    it and ``level`` carry a level they must agree."""
    if isinstance(context, ReferenceContext):
        if level is not None and context.level != level:
            raise ValueError(f"{context.level}-level context passed to the {level}-level branch")
        context = context.context
    return params(target, context)


def fuse_and_predict(enhanced: Mapping[Tuple[str, Modality], Tensor], params: FusionHead) -> Tensor:
    missing = [f"{lvl}/{m.value}" for lvl, m in STREAM_ORDER if (lvl, m) not in enhanced]
    if missing:
        raise ValueError(f"missing enhanced streams: {missing}")
    return params([enhanced[key] for key in STREAM_ORDER])
