"""Deterministic CSV and SVG output."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = [
    "fmt",
    "write_csv",
    "read_csv",
    "save_svg",
    "plot_frame_series",
    "plot_losses",
    "plot_projection",
    "plot_fold_metrics",
]

# fixed hash salt and no date stamp keep SVG bytes stable between runs
matplotlib.rcParams["svg.hashsalt"] = "herdreid"
matplotlib.rcParams["svg.fonttype"] = "none"


def fmt(v) -> str:
    """Shortest round-trip text for numbers; empty for missing values."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(x) for x in r])
    return path


def read_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def save_svg(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def _num(x) -> Optional[float]:
    if x is None or x == "":
        return None
    return float(x)


def plot_frame_series(series: dict, path, threshold: float = 0.7):
    """Per-frame mean IoU and usage rate; ``series`` maps geometry -> [(frame, iou, usage)]."""
    fig, axes = plt.subplots(2, 1, figsize=(8, 5), sharex=True)
    for geom, rows in sorted(series.items()):
        x = np.arange(len(rows))
        axes[0].plot(x, [np.nan if _num(r[1]) is None else _num(r[1]) for r in rows], label=geom, lw=1)
        axes[1].plot(x, [np.nan if _num(r[2]) is None else _num(r[2]) for r in rows], label=geom, lw=1)
    axes[0].set_ylabel("mean IoU")
    axes[1].set_ylabel(f"usage rate (IoU > {threshold:g})")
    axes[1].set_xlabel("frame")
    for ax in axes:
        ax.set_ylim(-0.02, 1.02)
        ax.grid(alpha=0.3)
    axes[0].legend(loc="lower right", frameon=False)
    fig.tight_layout()
    return save_svg(fig, path)


def plot_losses(curves: dict, path):
    """Loss against epoch; ``curves`` maps a name to its per-epoch losses."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, losses in sorted(curves.items()):
        ax.plot(np.arange(1, len(losses) + 1), losses, lw=1, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("NT-Xent loss")
    ax.grid(alpha=0.3)
    if len(curves) > 1:
        ax.legend(frameon=False, fontsize=7, ncol=2)
    fig.tight_layout()
    return save_svg(fig, path)


def _codes(labels: Sequence) -> np.ndarray:
    _, inv = np.unique(np.asarray([str(x) for x in labels]), return_inverse=True)
    return inv


def plot_projection(points: np.ndarray, truth: Sequence, clusters: Optional[Sequence], path):
    """2-D scatter coloured by true identity and, if given, by cluster."""
    panels = [("identity", truth)] + ([("K-Means cluster", clusters)] if clusters is not None else [])
    fig, axes = plt.subplots(1, len(panels), figsize=(4.5 * len(panels), 4), squeeze=False)
    for ax, (title, labels) in zip(axes[0], panels):
        ax.scatter(points[:, 0], points[:, 1], c=_codes(labels), cmap="tab20", s=10, linewidths=0)
        ax.set_title(title)
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
    fig.tight_layout()
    return save_svg(fig, path)


def plot_fold_metrics(rows: Sequence[dict], path):
    """Bar chart of per-fold metrics from ``reid_report.csv`` rows."""
    folds = sorted({r["fold"] for r in rows if r["fold"] not in ("mean", "std")})
    metrics = sorted({r["metric"] for r in rows})
    table = {(r["fold"], r["metric"]): _num(r["value"]) for r in rows}
    fig, ax = plt.subplots(figsize=(max(5, 1.1 * len(folds)), 3.5))
    width = 0.8 / max(1, len(metrics))
    for k, m in enumerate(metrics):
        vals = [table.get((f, m)) or 0.0 for f in folds]
        ax.bar(np.arange(len(folds)) + k * width, vals, width, label=m)
    ax.set_xticks(np.arange(len(folds)) + 0.4 - width / 2)
    ax.set_xticklabels(folds, rotation=30, ha="right", fontsize=7)
    ax.set_ylim(min(0.0, min((v for v in table.values() if v is not None), default=0)), 1.0)
    ax.legend(frameon=False, fontsize=7, ncol=3)
    fig.tight_layout()
    return save_svg(fig, path)
