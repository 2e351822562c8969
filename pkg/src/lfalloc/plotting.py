"""Report figures, rendered headless to image files."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.ticker import FuncFormatter  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _save(fig, path) -> str:
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_rd_curves(curves: dict, path, title: str = "") -> str:
    """``curves`` maps a label to a list of ``(bits, T' dB)`` pairs."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.6, 3.4))
        for label, pts in curves.items():
            pts = sorted(pts)
            ax.plot([p[0] / 1e6 for p in pts], [p[1] for p in pts], marker="o", ms=3.5, label=label)
        ax.set_xlabel("bits (Mb)")
        ax.set_ylabel("T' (dB)")
        ax.set_xscale("log")
        plain = FuncFormatter(lambda v, _: f"{v:g}")
        ax.xaxis.set_major_formatter(plain)
        ax.xaxis.set_minor_formatter(plain)
        if title:
            ax.set_title(title)
        ax.legend(loc="lower right")
        return _save(fig, path)


def plot_sai_heatmap(grid, path, title: str = "per-SAI MSE") -> str:
    """Heat map of an SAI grid; NaN cells (unmapped SAIs) are left blank."""
    grid = np.asarray(grid, dtype=float)
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, ax = plt.subplots(figsize=(3.8, 3.4))
        im = ax.imshow(np.ma.masked_invalid(grid), cmap="viridis", origin="upper")
        ax.set_xlabel("l")
        ax.set_ylabel("k")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, shrink=0.85)
        return _save(fig, path)


def plot_allocation(per_frame_bits, path, targets=None, title: str = "bits per frame") -> str:
    bits = np.asarray(per_frame_bits, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.2, 2.8))
        idx = np.arange(1, bits.size + 1)
        ax.bar(idx, bits / 1e3, width=0.85, color="tab:blue", alpha=0.75, label="achieved")
        if targets is not None:
            t = np.asarray(targets, dtype=float)
            ax.step(np.arange(1, t.size + 1), t / 1e3, where="mid", color="tab:red", lw=1.0, label="target")
            ax.legend(loc="upper right")
        ax.set_xlabel("frame")
        ax.set_ylabel("kbit")
        ax.set_title(title)
        return _save(fig, path)


def report_figures(reports, folder, prefix: str = "run") -> list[str]:
    """Per-report heat map and allocation bars, plus one R-D curve per mode."""
    out = []
    curves: dict = {}
    for r in reports:
        tag = f"{prefix}_{r.mode}_lambda{r.smooth_weight:g}_{int(round(r.budget))}"
        out.append(plot_sai_heatmap(r.quality.per_sai_mse, os.path.join(folder, tag + "_mse.png"),
                                    f"per-SAI MSE, {r.budget / 1e6:g} Mb"))
        if r.per_frame_bits:
            out.append(plot_allocation(r.per_frame_bits, os.path.join(folder, tag + "_bits.png")))
        curves.setdefault(f"{r.mode} (lambda={r.smooth_weight:g})", []).append((r.achieved_bits, r.quality.target_db))
    if any(len(v) > 1 for v in curves.values()):
        out.append(plot_rd_curves(curves, os.path.join(folder, prefix + "_rd.png")))
    return out
