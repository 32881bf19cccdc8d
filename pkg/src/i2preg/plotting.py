"""Matplotlib figures for the evaluation report.

Figures are rendered with the Agg backend and saved without a software tag
or timestamp, so the PNG bytes depend only on the data.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "svg.hashsalt": "i2preg",
}
PNG_METADATA = {"Software": None}


def golden_size(width_in: float = 6.5, scale: float = 1.0):
    return (width_in * scale, width_in * scale * (np.sqrt(5.0) - 1.0) / 2.0 / 2.0)


def _cdf(ax, values, tau, label, unit):
    v = np.sort(np.asarray(values, dtype=np.float64))
    finite = v[np.isfinite(v)]
    if len(v) == 0:
        ax.text(0.5, 0.5, "no data", ha="center", va="center", transform=ax.transAxes)
        return
    frac = np.arange(1, len(finite) + 1) / len(v)
    ax.step(finite, frac, where="post", color="#1f4e79", lw=1.2)
    ax.axvline(tau, color="#b03a2e", ls="--", lw=0.8, label=f"threshold {tau:g} {unit}")
    if len(finite):
        ax.axvline(np.median(v), color="0.4", ls=":", lw=0.8, label=f"median {np.median(v):.3g} {unit}")
    ax.set_xscale("symlog", linthresh=1e-3)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel(f"{label} [{unit}]")
    ax.set_ylabel("fraction of images")
    ax.legend(loc="lower right", frameon=False)


def error_cdf_figure(rre, rte, tau_r: float, tau_t: float, title: str | None = None):
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=golden_size())
        _cdf(a1, rre, tau_r, "rotation error", "deg")
        _cdf(a2, rte, tau_t, "translation error", "m")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
    return fig


def inlier_histogram(inlier_counts, title: str | None = None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=golden_size(3.5, 1.0))
        counts = np.asarray(inlier_counts, dtype=np.int64)
        if len(counts):
            bins = np.linspace(0, max(1, counts.max()), 21)
            ax.hist(counts, bins=bins, color="#1f4e79", edgecolor="white", lw=0.5)
        ax.set_xlabel("RANSAC inliers per image")
        ax.set_ylabel("images")
        if title:
            ax.set_title(title)
        fig.tight_layout()
    return fig


def save_png(fig, path) -> None:
    fig.savefig(path, format="png", metadata=PNG_METADATA)
    plt.close(fig)
