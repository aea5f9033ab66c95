"""Optional static SVG plots for benchmark and sweep outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# metadata Date=None keeps rerun outputs byte-identical
_SAVE_KW = {"format": "svg", "metadata": {"Date": None}}


def calibration_plot(reports: dict, k: int, path) -> None:
    """Calibration curves (per-bin accuracy vs mean confidence), one line per
    method, for shot count ``k``."""
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot([0, 1], [0, 1], "k--", lw=1, label="perfect")
    for name, per_k in sorted(reports.items()):
        bins = per_k[k].bins
        ax.plot([b[0] for b in bins], [b[1] for b in bins], marker="o", label=name)
    ax.set_xlabel("mean confidence")
    ax.set_ylabel("empirical accuracy")
    ax.set_title(f"calibration, k={k}")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def sweep_plot(sweep: dict, path) -> None:
    """Accuracy and NLL against the regularization constant, with the
    weights-derived constant marked."""
    grid = sorted(sweep["grid"])
    shots = sorted(next(iter(sweep["grid"].values())).keys())
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for k in shots:
        accs = [sweep["grid"][c][k].accuracy for c in grid]
        nlls = [sweep["grid"][c][k].mean_nll for c in grid]
        axes[0].semilogx(grid, accs, marker="o", label=f"k={k}")
        axes[1].semilogx(grid, nlls, marker="o", label=f"k={k}")
        fw = sweep["from_weights"]
        axes[0].scatter([fw["C"]], [fw["reports"][k].accuracy], marker="^", c="k", zorder=3)
        axes[1].scatter([fw["C"]], [fw["reports"][k].mean_nll], marker="^", c="k", zorder=3)
    axes[0].set_xlabel("C")
    axes[0].set_ylabel("accuracy")
    axes[1].set_xlabel("C")
    axes[1].set_ylabel("mean NLL")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
