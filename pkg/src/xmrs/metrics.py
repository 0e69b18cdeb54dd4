"""Regression-derived sentiment metrics: Acc2, F1, MAE, Pearson r and Acc7."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

__all__ = ["EvalReport", "evaluate", "acc7_class", "round_half_away"]


@dataclass(frozen=True)
class EvalReport:
    acc2: float
    f1: float
    mae: float
    corr: float
    acc7: float
    n_eval: int
    n_excluded_zero: int
    corr_defined: bool = True

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def acc7_class(x):
    """Integer bucket in -3..3."""
    return np.clip(round_half_away(x), -3, 3).astype(int)


def _binary_f1(pred_pos: np.ndarray, true_pos: np.ndarray) -> float:
    tp = int(np.sum(pred_pos & true_pos))
    fp = int(np.sum(pred_pos & ~true_pos))
    fn = int(np.sum(~pred_pos & true_pos))
    if tp + fp + fn == 0:
        # no positives predicted or present: precision and recall are vacuously 1
        return 1.0
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def pearson(x: np.ndarray, y: np.ndarray):
    """Returns ``(r, defined)``; r is 0 when either input is constant or n < 2."""
    if len(x) < 2:
        return 0.0, False
    xc, yc = x - x.mean(), y - y.mean()
    denom = np.sqrt(np.sum(xc * xc) * np.sum(yc * yc))
    if denom == 0 or not np.isfinite(denom):
        return 0.0, False
    return float(np.clip(np.sum(xc * yc) / denom, -1.0, 1.0)), True


def evaluate(predictions, labels, acc2_mode: str = "nonzero") -> EvalReport:
    """Score regression outputs.

    ``acc2_mode="nonzero"`` compares polarities on samples with non-zero
    labels only; ``"all"`` splits every sample at label >= 0 vs < 0. A zero
    prediction counts as positive in both modes.
    """
    preds = np.asarray(predictions, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.size} predictions vs {labels.size} labels")
    if preds.size == 0:
        raise ValueError("evaluate needs at least one sample")

    if acc2_mode == "nonzero":
        keep = labels != 0
        true_pos = labels[keep] > 0
    elif acc2_mode == "all":
        keep = np.ones_like(labels, dtype=bool)
        true_pos = labels >= 0
    else:
        raise ValueError(f"unknown acc2_mode {acc2_mode!r}")
    pred_pos = preds[keep] >= 0
    n_bin = int(keep.sum())
    acc2 = float(np.mean(pred_pos == true_pos)) if n_bin else 0.0
    f1 = _binary_f1(pred_pos, true_pos) if n_bin else 0.0

    corr, defined = pearson(preds, labels)
    return EvalReport(
        acc2=acc2,
        f1=float(f1),
        mae=float(np.mean(np.abs(preds - labels))),
        corr=corr,
        acc7=float(np.mean(acc7_class(preds) == acc7_class(labels))),
        n_eval=int(preds.size),
        n_excluded_zero=int(preds.size - n_bin),
        corr_defined=defined,
    )
