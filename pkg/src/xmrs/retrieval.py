"""Contrastive cross-modal retrieval.

Every sample/modality is summarised by a pooled embedding: the mean over
sequence positions, affinely projected into a shared space so that text,
visual and acoustic features can be compared by cosine similarity. For a
target modality ``alpha`` and each retrieved modality ``beta`` the retrieval
picks, among the other samples of the pool, the most similar ``beta``
embedding with matching polarity (positive) and with opposite polarity
(negative). At inference labels are unknown, so the positive is the most
similar candidate overall and no negative is produced.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .dataset import MODALITIES, ConfigurationError, Dataset, Modality, Sample

__all__ = [
    "EPS",
    "Polarity",
    "PooledEmbedding",
    "RetrievalSet",
    "Retrieved",
    "DegeneratePoolError",
    "RetrievalProjection",
    "pool_and_project",
    "cosine_similarity",
    "cosine_matrix",
    "retrieve",
    "retrieve_batch",
    "BatchRetrieval",
    "MemoryBank",
    "build_memory_bank",
]

EPS = 1e-12


class Polarity(str, enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    NEUTRAL = "neutral"

    @classmethod
    def of(cls, label: float) -> "Polarity":
        if label > 0:
            return cls.POSITIVE
        if label < 0:
            return cls.NEGATIVE
        return cls.NEUTRAL

    @property
    def opposite(self) -> "Polarity":
        return {
            Polarity.POSITIVE: Polarity.NEGATIVE,
            Polarity.NEGATIVE: Polarity.POSITIVE,
            Polarity.NEUTRAL: Polarity.NEUTRAL,
        }[self]


class DegeneratePoolError(RuntimeError):
    """Train-mode pool lacks a same-polarity or opposite-polarity candidate."""


@dataclass(frozen=True)
class PooledEmbedding:
    vector: np.ndarray
    modality: Modality
    sample_id: str
    polarity: Polarity


@dataclass(frozen=True)
class Retrieved:
    sample_id: str
    features: np.ndarray
    similarity: float
    pool_index: int


@dataclass(frozen=True)
class RetrievalSet:
    target_modality: Modality
    positives: Dict[Modality, Retrieved]
    negatives: Dict[Modality, Retrieved] = field(default_factory=dict)


class RetrievalProjection(nn.Module):
    """Per-modality affine maps native dim -> shared dim, applied after mean pooling."""

    def __init__(self, native_dims: Mapping[Modality, int], shared_dim: int):
        super().__init__()
        self.shared_dim = shared_dim
        self.proj = nn.ModuleDict(
            {m.value: nn.Linear(native_dims[m], shared_dim) for m in MODALITIES}
        )

    def forward(self, x: Tensor, modality: Modality) -> Tensor:
        """``x``: (..., L, d_m) -> (..., d_s)."""
        lin = self.proj[Modality(modality).value]
        if x.shape[-1] != lin.in_features:
            raise ValueError(
                f"{Modality(modality).value}: feature dim {x.shape[-1]} != projection input {lin.in_features}"
            )
        return lin(x.mean(dim=-2))

    def embed(self, feats: Mapping[Modality, Tensor]) -> Dict[Modality, Tensor]:
        return {m: self(feats[m], m) for m in MODALITIES}


def pool_and_project(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray,
    modality: Modality = Modality.TEXT,
    sample_id: str = "",
    label: float = 0.0,
) -> PooledEmbedding:
    """Mean-pool a (L, d_m) sequence and apply ``weight @ v + bias``.

    ``weight`` has shape (d_s, d_m), matching ``nn.Linear.weight``.
    """
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    if x.ndim != 2 or weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ValueError(f"shape mismatch: features {x.shape}, weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match weight rows {weight.shape[0]}")
    v = weight @ x.mean(axis=0) + bias
    return PooledEmbedding(v, Modality(modality), sample_id, Polarity.of(label))


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < EPS or nb < EPS:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """(n, d) x (k, d) -> (n, k) cosine similarities, zero for degenerate rows."""
    # dot / (|a| |b|) rather than normalising first, so exact ties stay exact
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    denom = na[:, None] * nb[None, :]
    sims = (a @ b.T) / denom.clamp_min(EPS * EPS)
    degenerate = (na[:, None] < EPS) | (nb[None, :] < EPS)
    return torch.where(degenerate, torch.zeros_like(sims), sims).clamp(-1.0, 1.0)


def _argmax_first(scores: Sequence[float], allowed: Sequence[bool]) -> Optional[int]:
    best, best_score = None, -np.inf
    for j, (s, ok) in enumerate(zip(scores, allowed)):
        if ok and s > best_score:
            best, best_score = j, s
    return best


def retrieve(
    target: Sample,
    target_embedding: PooledEmbedding,
    pool: Sequence[tuple],
    mode: str = "train",
) -> RetrievalSet:
    """Retrieve per-modality positives (and negatives in train mode) for one target.

    ``pool`` holds ``(Sample, {Modality: PooledEmbedding})`` pairs; an entry
    with the target's id is ignored. Ties go to the lowest pool index.
    """
    if mode not in ("train", "inference"):
        raise ConfigurationError(f"mode must be 'train' or 'inference', got {mode!r}")
    alpha = target_embedding.modality
    pol = Polarity.of(target.label)
    others = [s.id != target.id for s, _ in pool]
    cand_pol = [Polarity.of(s.label) for s, _ in pool]
    if mode == "train":
        if pol is Polarity.NEUTRAL:
            raise DegeneratePoolError(f"target {target.id!r} has a neutral label")
        pos_ok = [o and p is pol for o, p in zip(others, cand_pol)]
        neg_ok = [o and p is pol.opposite for o, p in zip(others, cand_pol)]
        if not any(pos_ok) or not any(neg_ok):
            raise DegeneratePoolError(
                f"pool for {target.id!r} lacks a {'same' if not any(pos_ok) else 'opposite'}-polarity candidate"
            )
    else:
        pos_ok = others
        neg_ok = None

    positives, negatives = {}, {}
    for beta in MODALITIES:
        sims = [cosine_similarity(target_embedding.vector, embs[beta].vector) for _, embs in pool]
        j = _argmax_first(sims, pos_ok)
        if j is None:
            raise DegeneratePoolError(f"empty pool for {target.id!r}")
        positives[beta] = Retrieved(pool[j][0].id, pool[j][0].features[beta], sims[j], j)
        if neg_ok is not None:
            k = _argmax_first(sims, neg_ok)
            negatives[beta] = Retrieved(pool[k][0].id, pool[k][0].features[beta], sims[k], k)
    return RetrievalSet(alpha, positives, negatives)


class BatchRetrieval(NamedTuple):
    """Index tensors have shape (3, 3, B): [target modality, retrieved modality, query].

    ``contrastive`` marks queries whose train-mode retrieval was well defined;
    for the rest ``neg_idx`` is -1 and positives fall back to the
    similarity-only rule so context generation can still proceed.
    """

    pos_idx: Tensor
    pos_sim: Tensor
    neg_idx: Tensor
    neg_sim: Tensor
    contrastive: Tensor


@torch.no_grad()
def retrieve_batch(
    query: Mapping[Modality, Tensor],
    query_labels: Tensor,
    query_keys: Sequence[str],
    pool: Mapping[Modality, Tensor],
    pool_labels: Tensor,
    pool_keys: Sequence[str],
    mode: str = "train",
) -> BatchRetrieval:
    """Vectorised :func:`retrieve` for every (query, target modality, retrieved modality)."""
    if mode not in ("train", "inference"):
        raise ConfigurationError(f"mode must be 'train' or 'inference', got {mode!r}")
    B, N = len(query_keys), len(pool_keys)
    pool_pos = {k: j for j, k in enumerate(pool_keys)}
    not_self = torch.ones(B, N, dtype=torch.bool)
    for i, k in enumerate(query_keys):
        j = pool_pos.get(k)
        if j is not None:
            not_self[i, j] = False
    if not bool(not_self.any(dim=1).all()):
        raise DegeneratePoolError("some query has no candidate other than itself")

    qs, ps = torch.sign(query_labels), torch.sign(pool_labels)
    same = (qs[:, None] == ps[None, :]) & (qs[:, None] != 0) & not_self
    opp = (qs[:, None] == -ps[None, :]) & (qs[:, None] != 0) & not_self
    if mode == "train":
        contrastive = same.any(dim=1) & opp.any(dim=1)
        pos_mask = torch.where(contrastive[:, None], same, not_self)
    else:
        contrastive = torch.zeros(B, dtype=torch.bool)
        pos_mask = not_self

    dtype = next(iter(query.values())).dtype
    pos_idx = torch.empty(3, 3, B, dtype=torch.long)
    neg_idx = torch.full((3, 3, B), -1, dtype=torch.long)
    pos_sim = torch.empty(3, 3, B, dtype=dtype)
    neg_sim = torch.full((3, 3, B), float("nan"), dtype=dtype)
    neg_inf = torch.tensor(-float("inf"), dtype=dtype)
    for a, alpha in enumerate(MODALITIES):
        for b, beta in enumerate(MODALITIES):
            sims = cosine_matrix(query[alpha], pool[beta])
            # torch.argmax returns the first maximal index: lowest-index tie-break
            p = torch.where(pos_mask, sims, neg_inf).argmax(dim=1)
            pos_idx[a, b] = p
            pos_sim[a, b] = sims.gather(1, p[:, None])[:, 0]
            if mode == "train":
                n = torch.where(opp, sims, neg_inf).argmax(dim=1)
                neg_idx[a, b] = torch.where(contrastive, n, torch.full_like(n, -1))
                neg_sim[a, b] = torch.where(
                    contrastive, sims.gather(1, n[:, None])[:, 0], torch.full_like(pos_sim[a, b], float("nan"))
                )
    return BatchRetrieval(pos_idx, pos_sim, neg_idx, neg_sim, contrastive)


class MemoryBank:
    """Frozen reference pool: pooled embeddings and raw features of a split."""

    def __init__(self, ids, labels, embeddings, features):
        self.ids: List[str] = list(ids)
        self.labels: Tensor = labels.clone()
        self.embeddings: Dict[Modality, Tensor] = {m: embeddings[m].detach().clone() for m in MODALITIES}
        self.features: Dict[Modality, Tensor] = {m: features[m].clone() for m in MODALITIES}
        for t in [self.labels, *self.embeddings.values(), *self.features.values()]:
            t.requires_grad_(False)
        self._frozen = True

    @property
    def frozen(self) -> bool:
        return self._frozen

    def __setattr__(self, name, value):
        if getattr(self, "_frozen", False):
            raise AttributeError("MemoryBank is frozen")
        super().__setattr__(name, value)

    def __len__(self) -> int:
        return len(self.ids)

    def pooled(self, modality: Modality, index: int) -> PooledEmbedding:
        return PooledEmbedding(
            self.embeddings[modality][index].numpy().copy(),
            modality,
            self.ids[index],
            Polarity.of(float(self.labels[index])),
        )


@torch.no_grad()
def build_memory_bank(
    dataset: Dataset, projection: RetrievalProjection, dtype: torch.dtype = torch.float32
) -> MemoryBank:
    if len(dataset) == 0:
        raise ConfigurationError("cannot build a memory bank from an empty dataset")
    feats = {m: torch.as_tensor(dataset.stacked(m), dtype=dtype) for m in MODALITIES}
    embs = projection.embed(feats)
    labels = torch.as_tensor(dataset.labels, dtype=dtype)
    return MemoryBank([s.id for s in dataset], labels, embs, feats)
