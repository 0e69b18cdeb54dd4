"""Training loop, checkpointing and logging."""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from .config import ModelConfig
from .dataset import MODALITIES, ConfigurationError, Dataset, Modality, make_batches
from .metrics import EvalReport, evaluate
from .model import RetrievalAugmentedModel, collate, count_parameters
from .objective import ccrl_loss, infonce_loss, mse_loss, total_loss

__all__ = [
    "LOG_FIELDS",
    "TRACE_FIELDS",
    "TrainingDivergedError",
    "Checkpoint",
    "TrainResult",
    "Trainer",
    "train",
    "configure_threads",
    "save_checkpoint",
    "load_checkpoint",
    "write_csv",
]

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "l_msa", "l_ccrl", "l_total", "skipped_terms")
TRACE_FIELDS = (
    "step", "sample_id", "target_modality", "retrieved_modality", "pos_id", "pos_sim", "neg_id", "neg_sim",
)
CHECKPOINT_FORMAT = "xmrs-checkpoint/1"


class TrainingDivergedError(RuntimeError):
    pass


def configure_threads() -> int:
    """Apply ``XMRS_THREADS``: 0 means single-threaded deterministic mode."""
    raw = os.environ.get("XMRS_THREADS")
    if raw is None:
        return torch.get_num_threads()
    n = int(raw)
    torch.set_num_threads(max(n, 1))
    if n == 0:
        torch.use_deterministic_algorithms(True)
    return max(n, 1)


@dataclass
class Checkpoint:
    config: ModelConfig
    dims: dict
    model_state: dict
    optimizer_state: Optional[dict] = None
    step: int = 0
    epoch: int = 0
    extra: dict = field(default_factory=dict)

    def build_model(self) -> RetrievalAugmentedModel:
        model = RetrievalAugmentedModel(self.dims, self.config)
        model.load_state_dict(self.model_state)
        model.eval()
        return model


def _encode(obj, arrays: list):
    """JSON-able structure with arrays replaced by ``{"__array__": index}``."""
    if isinstance(obj, torch.Tensor):
        arrays.append(obj.detach().cpu().numpy())
        return {"__array__": len(arrays) - 1}
    if isinstance(obj, dict):
        if all(isinstance(k, str) for k in obj):
            return {"__dict__": [[k, _encode(v, arrays)] for k, v in obj.items()]}
        return {"__dict__": [[_encode(k, arrays), _encode(v, arrays)] for k, v in obj.items()]}
    if isinstance(obj, (list, tuple)):
        return [_encode(v, arrays) for v in obj]
    if isinstance(obj, (bool, int, float, str)) or obj is None:
        return obj
    raise TypeError(f"cannot serialise {type(obj).__name__} in a checkpoint")


def _decode(obj, arrays: list):
    if isinstance(obj, dict):
        if "__array__" in obj:
            return torch.from_numpy(arrays[obj["__array__"]])
        return {_decode(k, arrays): _decode(v, arrays) for k, v in obj["__dict__"]}
    if isinstance(obj, list):
        return [_decode(v, arrays) for v in obj]
    return obj


def _zip_entry(name: str) -> zipfile.ZipInfo:
    # fixed timestamp so identical states give identical bytes
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    return info


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Zip container: ``meta.json`` (format, config, dims, counters),
    ``state.json`` (structure of parameters, optimizer state and run extras)
    and one ``arrays/<i>.npy`` entry per tensor."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": ckpt.config.to_dict(),
        "dims": {m.value: list(ckpt.dims[m]) for m in MODALITIES},
        "step": ckpt.step,
        "epoch": ckpt.epoch,
    }
    arrays: list = []
    state = _encode(
        {"model_state": dict(ckpt.model_state), "optimizer_state": ckpt.optimizer_state, "extra": ckpt.extra},
        arrays,
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_zip_entry("meta.json"), json.dumps(meta, indent=2, sort_keys=True))
        zf.writestr(_zip_entry("state.json"), json.dumps(state))
        for i, arr in enumerate(arrays):
            buf = io.BytesIO()
            np.save(buf, arr, allow_pickle=False)
            zf.writestr(_zip_entry(f"arrays/{i}.npy"), buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            raw = json.loads(zf.read("state.json"))
            n = sum(1 for name in zf.namelist() if name.startswith("arrays/"))
            arrays = [np.load(io.BytesIO(zf.read(f"arrays/{i}.npy")), allow_pickle=False) for i in range(n)]
    except (zipfile.BadZipFile, KeyError, OSError) as exc:
        raise ValueError(f"{path}: not an xmrs checkpoint") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    state = _decode(raw, arrays)
    return Checkpoint(
        config=ModelConfig.from_dict(meta["config"]),
        dims={Modality(m): tuple(v) for m, v in meta["dims"].items()},
        model_state=state["model_state"],
        optimizer_state=state["optimizer_state"],
        step=meta["step"],
        epoch=meta["epoch"],
        extra=state["extra"],
    )


def write_csv(path, fields, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields))
        w.writeheader()
        for r in rows:
            w.writerow(r)


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    log: List[dict]
    trace: List[dict]
    history: List[dict]

    @property
    def model(self) -> RetrievalAugmentedModel:
        return self.best.build_model()


def _fmt(x: float) -> str:
    return repr(float(x))


class Trainer:
    """Stateful training run; ``fit`` may be called repeatedly and the run may
    be resumed from :meth:`checkpoint`."""

    def __init__(
        self,
        train_set: Dataset,
        valid_set: Optional[Dataset],
        config: ModelConfig,
        trace: bool = False,
        trace_ids: Optional[set] = None,
    ):
        if len(train_set) < 2:
            raise ConfigurationError(f"training needs at least 2 samples, got {len(train_set)}")
        self.train_set, self.valid_set, self.config = train_set, valid_set, config
        self.trace_enabled, self.trace_ids = trace, trace_ids
        self.model = RetrievalAugmentedModel(train_set.dims, config)
        self.optimizer = torch.optim.AdamW(
            self.model.parameters(),
            lr=config.learning_rate,
            betas=config.betas,
            weight_decay=config.weight_decay,
        )
        self.step = 0
        self.epoch = 0
        self.log: List[dict] = []
        self.trace: List[dict] = []
        self.history: List[dict] = []
        self.best_mae = math.inf
        self.best_state = copy.deepcopy(self.model.state_dict())
        self.best_epoch = 0

    @property
    def n_parameters(self) -> int:
        return count_parameters(self.model)

    def contrastive(self, out, labels):
        cfg = self.config
        if cfg.contrastive_variant == "ccrl":
            return ccrl_loss(out.embeddings, out.retrieval, cfg.gamma)
        if cfg.contrastive_variant == "infonce":
            return infonce_loss(out.embeddings, labels, out.retrieval, cfg.temperature)
        zero = out.predictions.sum() * 0.0
        return zero, 0

    def train_step(self, batch) -> dict:
        cfg = self.config
        inputs = collate(batch.samples, self.model.dtype)
        self.model.train()
        out = self.model(inputs, mode="train")
        l_msa = mse_loss(out.predictions, inputs.labels)
        l_con, skipped = self.contrastive(out, inputs.labels)
        l_total = l_msa + cfg.lam * l_con
        self.step += 1
        if not torch.isfinite(l_total):
            raise TrainingDivergedError(
                f"non-finite loss at step {self.step} (l_msa={float(l_msa)}, l_contrastive={float(l_con)})"
            )
        self.optimizer.zero_grad(set_to_none=True)
        l_total.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
        self.optimizer.step()

        bd = total_loss(l_msa.item(), l_con.item(), cfg.lam, skipped)
        row = {
            "step": self.step,
            "l_msa": _fmt(bd.l_msa),
            "l_ccrl": _fmt(bd.l_ccrl),
            "l_total": _fmt(float(l_total.item())),
            "skipped_terms": skipped,
        }
        self.log.append(row)
        if self.trace_enabled:
            self._record_trace(inputs, out)
        return row

    def _record_trace(self, inputs, out) -> None:
        r = out.retrieval
        for i, sid in enumerate(inputs.ids):
            if self.trace_ids is not None and sid not in self.trace_ids:
                continue
            valid = bool(r.contrastive[i])
            for a, alpha in enumerate(MODALITIES):
                for b, beta in enumerate(MODALITIES):
                    self.trace.append(
                        {
                            "step": self.step,
                            "sample_id": sid,
                            "target_modality": alpha.value,
                            "retrieved_modality": beta.value,
                            "pos_id": out.pool.ids[int(r.pos_idx[a, b, i])],
                            "pos_sim": _fmt(r.pos_sim[a, b, i]),
                            "neg_id": out.pool.ids[int(r.neg_idx[a, b, i])] if valid else "",
                            "neg_sim": _fmt(r.neg_sim[a, b, i]) if valid else "",
                        }
                    )

    def evaluate(self, dataset: Dataset) -> EvalReport:
        bank = self.model.memory_bank(self.train_set)
        preds = self.model.predict(dataset, bank)
        return evaluate(preds, dataset.labels)

    def run_epoch(self) -> dict:
        cfg = self.config
        self.epoch += 1
        first = len(self.log)
        for batch in make_batches(self.train_set, cfg.batch_size, shuffle_seed=cfg.seed * 100003 + self.epoch):
            self.train_step(batch)
        msa = [float(r["l_msa"]) for r in self.log[first:]]
        entry = {"epoch": self.epoch, "train_l_msa": float(np.mean(msa))}
        if self.valid_set is not None and len(self.valid_set) > 0:
            rep = self.evaluate(self.valid_set)
            entry.update({f"valid_{k}": v for k, v in rep.as_dict().items()})
            if rep.mae < self.best_mae:
                self.best_mae, self.best_epoch = rep.mae, self.epoch
                self.best_state = copy.deepcopy(self.model.state_dict())
        else:
            self.best_epoch = self.epoch
            self.best_state = copy.deepcopy(self.model.state_dict())
        self.history.append(entry)
        log.info("epoch %d: %s", self.epoch, entry)
        return entry

    def fit(self, until_epoch: Optional[int] = None) -> "Trainer":
        until = self.config.epochs if until_epoch is None else min(until_epoch, self.config.epochs)
        while self.epoch < until:
            self.run_epoch()
        return self

    def checkpoint(self) -> Checkpoint:
        """Full resumable state of the run."""
        return Checkpoint(
            config=self.config,
            dims=dict(self.train_set.dims),
            model_state=copy.deepcopy(self.model.state_dict()),
            optimizer_state=copy.deepcopy(self.optimizer.state_dict()),
            step=self.step,
            epoch=self.epoch,
            extra={
                "best_mae": self.best_mae,
                "best_epoch": self.best_epoch,
                "best_state": copy.deepcopy(self.best_state),
                "log": list(self.log),
                "trace": list(self.trace),
                "history": list(self.history),
            },
        )

    def best_checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.config,
            dims=dict(self.train_set.dims),
            model_state=copy.deepcopy(self.best_state),
            step=self.step,
            epoch=self.best_epoch,
            extra={"best_mae": self.best_mae},
        )

    @classmethod
    def resume(cls, ckpt: Checkpoint, train_set: Dataset, valid_set: Optional[Dataset], **kwargs) -> "Trainer":
        t = cls(train_set, valid_set, ckpt.config, **kwargs)
        t.model.load_state_dict(ckpt.model_state)
        if ckpt.optimizer_state is not None:
            t.optimizer.load_state_dict(ckpt.optimizer_state)
        t.step, t.epoch = ckpt.step, ckpt.epoch
        extra = ckpt.extra
        t.best_mae = extra.get("best_mae", math.inf)
        t.best_epoch = extra.get("best_epoch", 0)
        t.best_state = copy.deepcopy(extra.get("best_state", t.model.state_dict()))
        t.log = list(extra.get("log", []))
        t.trace = list(extra.get("trace", []))
        t.history = list(extra.get("history", []))
        return t

    def result(self) -> TrainResult:
        return TrainResult(self.best_checkpoint(), self.checkpoint(), self.log, self.trace, self.history)


def train(
    train_set: Dataset,
    valid_set: Optional[Dataset],
    config: ModelConfig,
    *,
    trace: bool = False,
    trace_ids: Optional[set] = None,
) -> TrainResult:
    return Trainer(train_set, valid_set, config, trace=trace, trace_ids=trace_ids).fit().result()


def steps_per_epoch(n_train: int, batch_size: int) -> int:
    from .dataset import batch_sizes

    return len(batch_sizes(n_train, batch_size))


def epoch_similarity_summary(trace: List[dict], n_train: int, batch_size: int) -> List[dict]:
    """Mean positive/negative similarity per epoch from trace rows."""
    spe = steps_per_epoch(n_train, batch_size)
    acc: Dict[int, Dict[str, list]] = {}
    for row in trace:
        ep = (int(row["step"]) - 1) // spe + 1
        slot = acc.setdefault(ep, {"pos": [], "neg": []})
        slot["pos"].append(float(row["pos_sim"]))
        if row["neg_sim"] != "":
            slot["neg"].append(float(row["neg_sim"]))
    return [
        {
            "epoch": ep,
            "mean_pos_sim": float(np.mean(v["pos"])),
            "mean_neg_sim": float(np.mean(v["neg"])) if v["neg"] else float("nan"),
        }
        for ep, v in sorted(acc.items())
    ]
