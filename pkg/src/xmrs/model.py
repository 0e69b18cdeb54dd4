"""End-to-end retrieval-augmented sentiment regressor.

Per sample: pooled projection -> cross-modal retrieval -> modality-level and
sample-level reference contexts -> self-attention on each target stream ->
cross-augmentation per (level, modality) -> fusion head.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .config import ModelConfig
from .dataset import MODALITIES, Dataset, Dims, Modality, Sample
from .encoder import STREAM_ORDER, CrossAugment, FusionHead, SelfAttention
from .prompts import LEVELS, ContextGenerator, PromptBank
from .retrieval import BatchRetrieval, MemoryBank, RetrievalProjection, build_memory_bank, retrieve_batch

__all__ = ["Inputs", "Pool", "ForwardOutput", "RetrievalAugmentedModel", "collate", "count_parameters"]

_GEN_FLAG = {"modality": "no_mmg", "sample": "no_smg"}
_CAE_FLAG = {"modality": "no_mcae", "sample": "no_scae"}


def torch_dtype(name: str) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[name]


@dataclass
class Inputs:
    features: Dict[Modality, Tensor]
    labels: Tensor
    ids: List[str]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Pool:
    """Reference pool as seen by the forward pass."""

    embeddings: Dict[Modality, Tensor]
    features: Dict[Modality, Tensor]
    labels: Tensor
    ids: List[str]

    @classmethod
    def from_bank(cls, bank: MemoryBank) -> "Pool":
        return cls(bank.embeddings, bank.features, bank.labels, bank.ids)


@dataclass
class ForwardOutput:
    predictions: Tensor
    embeddings: Dict[Modality, Tensor]
    retrieval: BatchRetrieval
    pool: Pool


def collate(samples: Sequence[Sample], dtype: torch.dtype = torch.float32) -> Inputs:
    feats = {m: torch.as_tensor(np.stack([s.features[m] for s in samples]), dtype=dtype) for m in MODALITIES}
    labels = torch.as_tensor([s.label for s in samples], dtype=dtype)
    return Inputs(feats, labels, [s.id for s in samples])


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


class RetrievalAugmentedModel(nn.Module):
    def __init__(self, dims: Dims, config: ModelConfig):
        super().__init__()
        self.config = config
        self.dims = {Modality(m): tuple(v) for m, v in dims.items()}
        native = {m: self.dims[m][1] for m in MODALITIES}
        dm = config.d_model
        self.gen_levels = tuple(lvl for lvl in LEVELS if not config.has(_GEN_FLAG[lvl]))
        self.cae_levels = tuple(lvl for lvl in LEVELS if not config.has(_CAE_FLAG[lvl]))

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.retrieval_proj = RetrievalProjection(native, config.d_shared)
            self.stream_in = nn.ModuleDict({m.value: nn.Linear(native[m], dm) for m in MODALITIES})
            self.prompts = PromptBank(config.prompt_len, dm, self.gen_levels) if self.gen_levels else None
            self.generators = nn.ModuleDict({lvl: ContextGenerator(lvl, native, dm) for lvl in self.gen_levels})
            self.self_attn = nn.ModuleDict(
                {f"{lvl}_{m.value}": SelfAttention(dm, config.n_heads) for lvl in LEVELS for m in MODALITIES}
            )
            self.cae = nn.ModuleDict(
                {
                    f"{lvl}_{m.value}": CrossAugment(dm, config.ffn_mult, config.n_heads)
                    for lvl in self.cae_levels
                    for m in MODALITIES
                }
            )
            self.head = FusionHead(dm)
            if self.prompts is not None:
                self.prompts.reset_parameters(torch.Generator().manual_seed(config.seed))
        self.to(torch_dtype(config.dtype))

    @property
    def dtype(self) -> torch.dtype:
        return self.head.fc1.weight.dtype

    def embed(self, features: Mapping[Modality, Tensor]) -> Dict[Modality, Tensor]:
        return self.retrieval_proj.embed(features)

    def context(self, level: str, target: Modality, inputs: Inputs, pool: Pool, retrieval: BatchRetrieval) -> Tensor:
        a = MODALITIES.index(target)
        if level == "modality":
            sources = inputs.features
        else:
            sources = {
                beta: pool.features[beta][retrieval.pos_idx[a, b]] for b, beta in enumerate(MODALITIES)
            }
        return self.generators[level](target, sources, self.prompts.get(level, target))

    def forward(self, inputs: Inputs, pool: Optional[Pool] = None, mode: str = "train") -> ForwardOutput:
        emb = self.embed(inputs.features)
        if pool is None:
            if mode != "train":
                raise ValueError("inference needs an explicit pool (memory bank)")
            pool = Pool(emb, inputs.features, inputs.labels, inputs.ids)
        retrieval = retrieve_batch(
            {m: e.detach() for m, e in emb.items()},
            inputs.labels,
            inputs.ids,
            {m: e.detach() for m, e in pool.embeddings.items()},
            pool.labels,
            pool.ids,
            mode,
        )

        enhanced = {}
        for level in LEVELS:
            for m in MODALITIES:
                key = f"{level}_{m.value}"
                target = self.self_attn[key](self.stream_in[m.value](inputs.features[m]))
                if level in self.cae_levels:
                    if level in self.gen_levels:
                        ctx = self.context(level, m, inputs, pool, retrieval)
                    else:
                        ctx = target
                    target = self.cae[key](target, ctx)
                enhanced[(level, m)] = target
        preds = self.head([enhanced[k] for k in STREAM_ORDER])
        return ForwardOutput(preds, emb, retrieval, pool)

    @torch.no_grad()
    def memory_bank(self, dataset: Dataset) -> MemoryBank:
        return build_memory_bank(dataset, self.retrieval_proj, self.dtype)

    @torch.no_grad()
    def predict(self, dataset: Dataset, bank: MemoryBank, batch_size: int = 64) -> np.ndarray:
        """Inference-mode predictions with ``bank`` as the reference pool."""
        was_training = self.training
        self.eval()
        pool = Pool.from_bank(bank)
        out = []
        for start in range(0, len(dataset), batch_size):
            chunk = dataset.samples[start:start + batch_size]
            out.append(self(collate(chunk, self.dtype), pool, mode="inference").predictions)
        self.train(was_training)
        if not out:
            return np.zeros(0)
        return torch.cat(out).double().numpy()
