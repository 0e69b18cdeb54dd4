"""Training objectives: regression loss, contrastive retrieval loss, InfoNCE
alternative, and their weighted combination."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import torch
from torch import Tensor

from .dataset import MODALITIES, ConfigurationError, Modality
from .retrieval import EPS, BatchRetrieval

__all__ = [
    "LossBreakdown",
    "mse_loss",
    "ccrl_loss",
    "infonce_from_similarities",
    "infonce_loss",
    "total_loss",
]


@dataclass(frozen=True)
class LossBreakdown:
    l_msa: float
    l_ccrl: float
    l_total: float
    lam: float
    skipped_contrastive_terms: int = 0


def mse_loss(predictions, labels) -> Tensor:
    predictions = torch.as_tensor(predictions)
    labels = torch.as_tensor(labels, dtype=predictions.dtype)
    if predictions.numel() == 0 or labels.numel() == 0:
        raise ValueError("mse_loss needs non-empty inputs")
    if predictions.shape != labels.shape:
        raise ValueError(f"shape mismatch: {tuple(predictions.shape)} vs {tuple(labels.shape)}")
    return ((predictions - labels) ** 2).mean()


def ccrl_loss(
    query: Mapping[Modality, Tensor],
    retrieval: BatchRetrieval,
    gamma: float,
    pool: Optional[Mapping[Modality, Tensor]] = None,
    reduction: str = "mean",
):
    """Squared positive distance plus hinge on squared negative distance.

    Sums over queries and all nine (target, retrieved) modality pairs;
    ``reduction="mean"`` divides by the number of contributing terms. Queries
    without a well-defined train-mode retrieval contribute nothing.

    Returns ``(loss, skipped_terms)``.
    """
    if not gamma > 0:
        raise ConfigurationError(f"gamma must be > 0, got {gamma}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    pool = query if pool is None else pool
    valid = retrieval.contrastive
    n_valid = int(valid.sum())
    n_queries = valid.numel()
    skipped = (n_queries - n_valid) * len(MODALITIES) ** 2
    anchor_ref = query[MODALITIES[0]]
    if n_valid == 0:
        return anchor_ref.sum() * 0.0, skipped

    total = anchor_ref.new_zeros(())
    for a, alpha in enumerate(MODALITIES):
        anchors = query[alpha][valid]
        for b, beta in enumerate(MODALITIES):
            pos = pool[beta][retrieval.pos_idx[a, b][valid]]
            neg = pool[beta][retrieval.neg_idx[a, b][valid]]
            d_pos2 = ((anchors - pos) ** 2).sum(dim=-1)
            d_neg2 = ((anchors - neg) ** 2).sum(dim=-1)
            total = total + (d_pos2 + torch.clamp(gamma - d_neg2, min=0.0)).sum()
    if reduction == "mean":
        total = total / (n_valid * len(MODALITIES) ** 2)
    return total, skipped


def infonce_from_similarities(pos_sims: Tensor, neg_sims: Sequence[Tensor], temperature: float) -> Tensor:
    """Mean over anchors of -log softmax at the positive; ``neg_sims[i]`` may be empty."""
    if not temperature > 0:
        raise ConfigurationError(f"temperature must be > 0, got {temperature}")
    losses = []
    for s_pos, s_neg in zip(pos_sims, neg_sims):
        logits = torch.cat([s_pos.reshape(1), s_neg.reshape(-1)]) / temperature
        losses.append(torch.logsumexp(logits, dim=0) - logits[0])
    return torch.stack(losses).mean()


def _normalize(x: Tensor) -> Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(EPS)


def infonce_loss(
    query: Mapping[Modality, Tensor],
    query_labels: Tensor,
    retrieval: BatchRetrieval,
    temperature: float = 0.07,
    pool: Optional[Mapping[Modality, Tensor]] = None,
    pool_labels: Optional[Tensor] = None,
):
    """InfoNCE over cosine similarities: the retrieved positive against every
    opposite-polarity pool embedding of the same retrieved modality.

    Returns ``(loss, skipped_terms)``.
    """
    if not temperature > 0:
        raise ConfigurationError(f"temperature must be > 0, got {temperature}")
    pool = query if pool is None else pool
    pool_labels = query_labels if pool_labels is None else pool_labels
    valid = retrieval.contrastive
    n_valid = int(valid.sum())
    skipped = (valid.numel() - n_valid) * len(MODALITIES) ** 2
    if n_valid == 0:
        return query[MODALITIES[0]].sum() * 0.0, skipped

    opp = torch.sign(query_labels)[:, None] == -torch.sign(pool_labels)[None, :]
    opp = opp & (torch.sign(query_labels)[:, None] != 0)
    total, count = None, 0
    for a, alpha in enumerate(MODALITIES):
        q = _normalize(query[alpha])
        for b, beta in enumerate(MODALITIES):
            k = _normalize(pool[beta])
            sims = q @ k.T / temperature
            pos_logit = sims.gather(1, retrieval.pos_idx[a, b].clamp_min(0)[:, None])[:, 0]
            neg_logits = sims.masked_fill(~opp, -math.inf)
            lse = torch.logsumexp(torch.cat([pos_logit[:, None], neg_logits], dim=1), dim=1)
            term = (lse - pos_logit)[valid].sum()
            total = term if total is None else total + term
            count += n_valid
    return total / count, skipped


def total_loss(l_msa, l_ccrl, lam: float, skipped: int = 0) -> LossBreakdown:
    l_msa, l_ccrl = float(l_msa), float(l_ccrl)
    return LossBreakdown(l_msa, l_ccrl, l_msa + lam * l_ccrl, lam, skipped)
