"""Figures rendered next to the CSV reports.

Only the Agg backend is used so commands work headless; every figure is
written to a file and closed.
"""
from __future__ import annotations

from pathlib import Path
from typing import Iterable, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["STYLE", "plot_sweep", "plot_similarity", "plot_bars", "plot_training_log"]

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}

# Without fixed metadata the PNG bytes would change between library versions only.
_PNG_META = {"Software": None}


def _figure(width: float = 4.8, height: float = 3.0):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_sweep(
    rows: Sequence[dict],
    path,
    xlabel: str,
    metrics: Iterable[str] = ("acc2", "f1"),
    secondary: Optional[str] = None,
    secondary_label: Optional[str] = None,
    title: Optional[str] = None,
) -> Path:
    """Metric curves over the swept value; ``secondary`` goes on a right axis."""
    xs = [float(r["swept_value"]) for r in rows]
    fig, ax = _figure()
    with plt.rc_context(STYLE):
        for m in metrics:
            ax.plot(xs, [float(r[m]) for r in rows], marker="o", label=m)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("score")
        if secondary is not None:
            ax2 = ax.twinx()
            ax2.plot(xs, [float(r[secondary]) for r in rows], color="tab:red", ls="--", marker="s", label=secondary)
            ax2.set_ylabel(secondary_label or secondary, color="tab:red")
            ax2.spines["top"].set_visible(False)
        ax.legend(loc="lower left", frameon=False)
        if title:
            ax.set_title(title)
    return _save(fig, path)


def plot_similarity(summary: Sequence[dict], path, title: Optional[str] = None) -> Path:
    """Mean cosine similarity to retrieved positives/negatives per epoch."""
    epochs = [r["epoch"] for r in summary]
    fig, ax = _figure()
    with plt.rc_context(STYLE):
        ax.plot(epochs, [r["mean_pos_sim"] for r in summary], marker=".", color="tab:green", label="positive")
        ax.plot(epochs, [r["mean_neg_sim"] for r in summary], marker=".", color="tab:purple", label="negative")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean cosine similarity")
        ax.legend(frameon=False)
        if title:
            ax.set_title(title)
    return _save(fig, path)


def plot_bars(rows: Sequence[dict], label_key: str, path, metrics: Iterable[str] = ("acc2", "f1"),
              title: Optional[str] = None) -> Path:
    metrics = list(metrics)
    labels = [str(r[label_key]) for r in rows]
    width = 0.8 / len(metrics)
    fig, ax = _figure(width=max(4.8, 0.9 * len(rows) + 1.5))
    with plt.rc_context(STYLE):
        for k, m in enumerate(metrics):
            xs = [i + (k - (len(metrics) - 1) / 2) * width for i in range(len(rows))]
            ax.bar(xs, [float(r[m]) for r in rows], width=width, label=m)
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(labels, rotation=20, ha="right")
        ax.set_ylabel("score")
        ax.legend(frameon=False, ncol=len(metrics))
        if title:
            ax.set_title(title)
    return _save(fig, path)


def plot_training_log(log_rows: Sequence[dict], path) -> Path:
    steps = [int(r["step"]) for r in log_rows]
    fig, ax = _figure()
    with plt.rc_context(STYLE):
        ax.plot(steps, [float(r["l_msa"]) for r in log_rows], lw=0.8, label="l_msa")
        ax.plot(steps, [float(r["l_total"]) for r in log_rows], lw=0.8, alpha=0.7, label="l_total")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax2 = ax.twinx()
        ax2.plot(steps, [float(r["l_ccrl"]) for r in log_rows], lw=0.6, color="tab:gray", label="l_ccrl")
        ax2.set_ylabel("contrastive loss", color="tab:gray")
        ax.legend(loc="upper right", frameon=False)
    return _save(fig, path)
