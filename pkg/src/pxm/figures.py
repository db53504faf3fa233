"""Matplotlib renderers for the report paths.

Every eval/train command that writes a CSV also drops a PNG next to it;
all figures go through savefig with a non-interactive backend.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "plot_training_curves",
    "plot_uncertainty_trace",
    "plot_subgroup_bars",
    "plot_ablation_bars",
]

plt.rcParams.update({
    "figure.figsize": (7.0, 4.2),
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 10,
})


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training_curves(metrics_rows, path) -> Path:
    """Loss terms per step from the training metrics log."""
    steps = [r[1] for r in metrics_rows]
    fig, ax = plt.subplots()
    for idx, label in ((2, "text term"), (3, "teacher term"), (4, "total")):
        ax.plot(steps, [r[idx] for r in metrics_rows], label=label, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    return _save(fig, path)


def plot_uncertainty_trace(signal_lead, fs: float, trace, win_seconds: float,
                           path, burst_span=None) -> Path:
    """Lead trace with the per-window uncertainty overlaid (two panels)."""
    t = np.arange(len(signal_lead)) / fs
    fig, (ax0, ax1) = plt.subplots(2, 1, sharex=True, figsize=(7.5, 4.8))
    ax0.plot(t, signal_lead, linewidth=0.7, color="tab:blue")
    ax0.set_ylabel("lead I (mV)")
    if burst_span is not None:
        ax0.axvspan(burst_span[0], burst_span[1], color="tab:red", alpha=0.2,
                    label="noise burst")
        ax0.legend(loc="upper right")
    offsets = [o for o, _ in trace]
    values = [u for _, u in trace]
    centers = [o + win_seconds / 2 for o in offsets]
    ax1.step(centers, values, where="mid", color="tab:orange")
    ax1.scatter(centers, values, s=14, color="tab:orange")
    best = int(np.argmin(values))
    ax1.scatter([centers[best]], [values[best]], s=60, facecolors="none",
                edgecolors="tab:green", label="selected window")
    ax1.set_xlabel("time (s)")
    ax1.set_ylabel("uncertainty")
    ax1.legend(loc="upper right")
    return _save(fig, path)


def plot_subgroup_bars(report_rows, metric: str, path) -> Path:
    """One bar per subgroup for a single metric from an EvalReport."""
    groups, values = [], []
    for row in report_rows:
        if row["metric"] == metric:
            groups.append(row["group"])
            values.append(row["value"])
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    ax.bar(range(len(groups)), values, color="tab:blue", width=0.6)
    ax.set_xticks(range(len(groups)))
    ax.set_xticklabels(groups, rotation=20, ha="right")
    ax.set_ylabel(metric)
    ax.set_ylim(0, 1)
    return _save(fig, path)


def plot_ablation_bars(summary_rows, path) -> Path:
    """Grouped mean +/- sd bars per loss variant for both ablation metrics."""
    variants = [r["variant"] for r in summary_rows]
    x = np.arange(len(variants))
    fig, ax = plt.subplots()
    for offset, (key, label, color) in enumerate((
            ("zs_balanced_accuracy", "zero-shot balanced acc.", "tab:blue"),
            ("recall@1", "text->ECG R@1", "tab:orange"))):
        means = [r[f"{key}_mean"] for r in summary_rows]
        sds = [r[f"{key}_sd"] for r in summary_rows]
        ax.bar(x + 0.4 * offset - 0.2, means, yerr=sds, width=0.35,
               label=label, color=color, capsize=3)
    ax.set_xticks(x)
    ax.set_xticklabels(variants, rotation=15, ha="right")
    ax.set_ylim(0, 1)
    ax.legend()
    return _save(fig, path)
