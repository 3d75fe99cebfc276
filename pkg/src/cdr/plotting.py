"""Figures for benchmark reports, rendered to files with the Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SAVE = dict(dpi=120, bbox_inches="tight", metadata={"Software": None})


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def accuracy_vs_tokens(rows: Sequence[Mapping[str, float]], path) -> Path:
    """Scatter of mean tokens against accuracy, one labelled point per baseline."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for row in rows:
        x, y = row["mean_tokens"], row["accuracy"]
        ax.scatter(x, y, s=30)
        lo, hi = row.get("accuracy_ci_low"), row.get("accuracy_ci_high")
        if lo is not None and hi is not None:
            ax.vlines(x, lo, hi, linewidth=1)
        ax.annotate(row["baseline"], (x, y), textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax.set_xlabel("mean tokens per query")
    ax.set_ylabel("accuracy")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def metric_bars(rows: Sequence[Mapping[str, float]], metric: str, path, ylabel: str | None = None) -> Path:
    names = [r["baseline"] for r in rows]
    values = [r[metric] if r.get(metric) is not None else np.nan for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(np.arange(len(names)), values)
    ax.set_xticks(np.arange(len(names)), names, rotation=35, ha="right", fontsize=8)
    ax.set_ylabel(ylabel or metric)
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)


def tau_trajectory(trace: np.ndarray, path) -> Path:
    """Threshold over the query stream; one line per repeat."""
    trace = np.atleast_2d(trace)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for r in trace:
        ax.plot(r, linewidth=0.8)
    ax.set_xlabel("query")
    ax.set_ylabel("threshold")
    ax.set_ylim(0, 1)
    return _save(fig, path)
