"""Matplotlib rendering of sweep curves and selected-hyperparameter histograms."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

golden_mean = (np.sqrt(5.0) - 1.0) / 2.0
fig_width = 5.0  # inches
RC = {
    "figure.figsize": (fig_width, fig_width * golden_mean),
    "axes.labelsize": 10,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "xtick.major.size": 3,
    "ytick.major.size": 3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "tabmtr",  # stable ids inside svg output
    "savefig.dpi": 150,
}

MASK_LABELS = ("mtr", "mtr_after_bias", "mtr_before_bias", "scarf")


def _axis_name(method: str) -> str:
    return "$p_m$" if method in MASK_LABELS else r"$\alpha$"


def savefig(fig, path, formats=("svg", "png")) -> list[Path]:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    out = []
    for ext in formats:
        target = path.with_suffix("." + ext)
        # svg metadata would otherwise embed a timestamp
        meta = {"Date": None} if ext == "svg" else {}
        fig.savefig(target, bbox_inches="tight", metadata=meta)
        out.append(target)
    plt.close(fig)
    return out


def plot_curves(curves: dict, out_dir, metric_names: dict | None = None) -> list[Path]:
    """One figure per dataset: mean test score against the hyperparameter with
    a translucent +-1 std band. Methods without a grid are drawn as flat lines.

    ``curves`` maps (dataset, method) -> [(hp, mean, std), ...].
    """
    metric_names = metric_names or {}
    by_dataset = defaultdict(dict)
    for (dataset, method), rows in curves.items():
        by_dataset[dataset][method] = rows
    paths = []
    with plt.rc_context(RC):
        for dataset, methods in sorted(by_dataset.items()):
            gridded = {m: r for m, r in methods.items() if r[0][0] is not None}
            flat = {m: r for m, r in methods.items() if r[0][0] is None}
            # mask-ratio and mixing-alpha methods live on different x axes
            groups = [g for g in (
                {m: r for m, r in gridded.items() if m in MASK_LABELS},
                {m: r for m, r in gridded.items() if m not in MASK_LABELS},
            ) if g] or [{}]
            fig, axes = plt.subplots(1, len(groups), squeeze=False,
                                     figsize=(fig_width * len(groups), fig_width * golden_mean))
            for ax, group in zip(axes[0], groups):
                for method, rows in sorted(group.items()):
                    hp, mean, std = (np.array(c, dtype=float) for c in zip(*rows))
                    line, = ax.plot(hp, mean, marker="o", ms=3, label=method)
                    ax.fill_between(hp, mean - std, mean + std, color=line.get_color(), alpha=0.2,
                                    linewidth=0)
                    ax.set_xlabel(_axis_name(method))
                for method, rows in sorted(flat.items()):
                    _, mean, std = rows[0]
                    ax.axhline(mean, color="0.3", ls="--", lw=1, label=method)
                ax.set_ylabel(metric_names.get(dataset, "score"))
                ax.set_title(dataset)
                ax.legend(frameon=False)
            paths += savefig(fig, Path(out_dir) / f"{_slug(dataset)}__curves")
    return paths


def plot_hyperparameter_histogram(cells, out_path) -> list[Path]:
    """Histogram of the selected best hyperparameter per method, pooled over datasets."""
    chosen = defaultdict(list)
    for c in cells:
        if c.hyperparameter is not None:
            chosen[c.method].append(c.hyperparameter)
    if not chosen:
        return []
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(chosen), squeeze=False,
                                 figsize=(2.2 * len(chosen), 2.2))
        for ax, (method, values) in zip(axes[0], sorted(chosen.items())):
            vals, counts = np.unique(values, return_counts=True)
            ax.bar([f"{v:g}" for v in vals], counts, color="0.4")
            ax.set_title(method)
            ax.set_xlabel(_axis_name(method))
            ax.tick_params(axis="x", rotation=45)
        axes[0][0].set_ylabel("count")
        return savefig(fig, out_path)


def _slug(text: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in text)
