"""Figures written next to the evaluation tables."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import EvalRow, mean_and_se  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}

METHOD_COLOURS = {"unguided": "#8c8c8c", "linguine": "#c0392b"}


def plot_eval(rows: list[EvalRow], path) -> Path:
    """Mean Dice with standard errors per method, and the paired per-tumour
    comparison when both methods are present."""
    path = Path(path)
    methods = sorted({r.method for r in rows}, key=lambda m: (m != "unguided", m))
    paired = {"unguided", "linguine"} <= set(methods)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2 if paired else 1, figsize=(7.0 if paired else 3.5, 3.0), squeeze=False)
        ax = axes[0, 0]
        stats = [mean_and_se([r.dice for r in rows if r.method == m]) for m in methods]
        ax.bar(range(len(methods)), [s[0] for s in stats], yerr=[s[1] for s in stats], capsize=3,
               color=[METHOD_COLOURS.get(m, "#2c7fb8") for m in methods])
        ax.set_xticks(range(len(methods)), methods)
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("Dice")
        ax.set_title("Mean Dice (± s.e.)")

        if paired:
            a = {(r.scan_id, r.tumour_id): r.dice for r in rows if r.method == "unguided"}
            b = {(r.scan_id, r.tumour_id): r.dice for r in rows if r.method == "linguine"}
            keys = sorted(set(a) & set(b))
            ax = axes[0, 1]
            ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
            ax.scatter([a[k] for k in keys], [b[k] for k in keys], s=14, color=METHOD_COLOURS["linguine"])
            ax.set_xlim(-0.02, 1.02)
            ax.set_ylim(-0.02, 1.02)
            ax.set_xlabel("unguided Dice")
            ax.set_ylabel("propagated Dice")
            ax.set_title(f"Paired comparison (n={len(keys)})")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_click_probabilities(probs, kept, threshold: float, path) -> Path:
    """Histogram of click validity probabilities, kept clicks highlighted."""
    path = Path(path)
    probs = np.asarray(probs, dtype=float)
    kept = np.asarray(kept, dtype=bool)
    bins = np.linspace(0, 1, 21)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.5, 2.6))
        ax.hist(probs[~kept], bins=bins, color="0.6", label="discarded")
        ax.hist(probs[kept], bins=bins, color=METHOD_COLOURS["linguine"], label="kept")
        ax.axvline(threshold, color="k", lw=0.8, ls=":")
        ax.set_xlabel("click validity probability")
        ax.set_ylabel("clicks")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
