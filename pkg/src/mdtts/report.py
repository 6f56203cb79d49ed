"""Figure rendering for the report paths.

Every command that emits delimited output can also render a PNG next to it:
metric aggregates for `eval`, per-dialect corpus statistics for `stats`, and
average classifier softmax per dialect for `export-features`.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .dialect import DIALECTS
from .metrics import MetricReport
from .pipeline import DatasetStats

__all__ = ["metric_summary_figure", "stats_figure", "features_figure"]


def metric_summary_figure(report: MetricReport, path: str | Path) -> Path:
    """Bar chart of aggregate metric means with one-sigma error bars."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    agg = report.aggregate()
    names = list(agg)
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(names) + 1.5), 3.2))
    if names:
        means = [agg[n]["mean"] for n in names]
        stds = [agg[n]["std"] for n in names]
        ax.bar(range(len(names)), means, yerr=stds, capsize=4,
               color="#4878a8")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=20, ha="right")
        ax.set_ylabel("mean over utterances")
    else:
        ax.text(0.5, 0.5, "no metrics", ha="center", va="center",
                transform=ax.transAxes)
    ax.set_title(f"metric summary ({len(report.per_utterance)} utterances)")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def stats_figure(stats: DatasetStats, path: str | Path) -> Path:
    """File counts and total duration per dialect, side by side."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7.2, 3.2))
    names = list(DIALECTS)
    files = [stats.per_dialect[n].files for n in names]
    minutes = [stats.per_dialect[n].duration_seconds / 60.0 for n in names]
    ax1.bar(names, files, color="#4878a8")
    ax1.set_ylabel("kept files")
    ax2.bar(names, minutes, color="#6aa84f")
    ax2.set_ylabel("total duration (min)")
    for ax in (ax1, ax2):
        ax.grid(axis="y", alpha=0.3)
        ax.tick_params(axis="x", rotation=15)
    title = "dataset statistics"
    if stats.empty:
        title += " (empty)"
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def features_figure(rows: list[dict], path: str | Path) -> Path:
    """Average softmax probability per true dialect (grouped bars)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    groups = []
    for dialect in DIALECTS:
        probs = [row["proba"] for row in rows if row["dialect"] == dialect]
        groups.append(np.mean(probs, axis=0) if probs else np.zeros(3))
    width = 0.25
    x = np.arange(3)
    colors = ("#4878a8", "#6aa84f", "#b5541c")
    for k in range(3):
        ax.bar(x + (k - 1) * width, [g[k] for g in groups], width,
               label=f"p({DIALECTS[k]})", color=colors[k])
    ax.set_xticks(x)
    ax.set_xticklabels(DIALECTS)
    ax.set_xlabel("true dialect")
    ax.set_ylabel("mean softmax")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
