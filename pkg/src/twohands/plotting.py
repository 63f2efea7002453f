"""Report figures (matplotlib, Agg backend, written straight to files)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .handmodel import FINGER_NAMES, HANDS  # noqa: E402

_STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def pck_figure(curve, path, label=None):
    """PCK against threshold in millimetres. ``curve`` is [(threshold_m, fraction)]."""
    t, f = np.array(curve).T
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(t * 1000, f, marker="o", ms=3, label=label)
        ax.set_xlabel("threshold (mm)")
        ax.set_ylabel("PCK")
        ax.set_ylim(0, 1.02)
        ax.grid(alpha=0.3)
        if label:
            ax.legend(loc="lower right")
        return _save(fig, path)


def energy_figure(traces, path):
    """Per-frame Gauss-Newton energy traces on a log scale."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        cmap = plt.get_cmap("viridis")
        for t, tr in enumerate(traces):
            ax.semilogy(np.maximum(tr, 1e-300), color=cmap(t / max(len(traces) - 1, 1)), lw=1)
        ax.set_xlabel("evaluation")
        ax.set_ylabel("energy")
        ax.set_title(f"{len(traces)} frames (dark = early)")
        return _save(fig, path)


def bone_std_figure(std, path):
    """Bar chart of per-bone length std (metres in, millimetres shown), one group per hand."""
    std = np.asarray(std) * 1000
    nb = std.shape[1]
    x = np.arange(nb)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6, 3))
        for h, name in enumerate(HANDS):
            ax.bar(x + (h - 0.5) * 0.4, std[h], width=0.4, label=name)
        ax.set_xticks(x[1::3], [FINGER_NAMES[i] for i in range(nb // 3)])
        ax.set_ylabel("bone length std (mm)")
        ax.legend()
        return _save(fig, path)


def overlay_figure(depth, silhouette, path, title=None):
    """Depth image with the fitted model silhouette outlined on top."""
    d = np.where(depth > 0, depth, np.nan)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.imshow(d, cmap="gray_r")
        if silhouette.any():
            ax.contour(silhouette.astype(float), levels=[0.5], colors="tab:red", linewidths=0.8)
        ax.set_axis_off()
        if title:
            ax.set_title(title)
        return _save(fig, path)
