"""Figures for ablation reports and sampled clips (written to files, never shown)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.colors import hsv_to_rgb  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def latent_to_rgb(frame) -> np.ndarray:
    """[4, H, W] latent -> [H, W, 3]: hue from the colour channels, value from occupancy."""
    f = np.asarray(frame, dtype=np.float64)
    occ = np.clip((f[0] + 1) / 2, 0, 1)
    hue = (np.arctan2(f[2], f[1]) / (2 * np.pi)) % 1.0
    sat = np.clip(np.hypot(f[1], f[2]) / np.maximum(occ, 1e-6), 0, 1)
    return hsv_to_rgb(np.stack([hue, sat, occ], axis=-1))


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_clip_grid(clips: dict, path, max_frames: int = 8) -> Path:
    """One row per named clip [N, 4, H, W], one column per frame."""
    names = list(clips)
    n = min(max_frames, max(int(np.asarray(c).shape[0]) for c in clips.values()))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(names), n, figsize=(1.1 * n, 1.2 * len(names)), squeeze=False)
        for i, name in enumerate(names):
            clip = np.asarray(clips[name])
            for k in range(n):
                ax = axes[i, k]
                ax.axis("off")
                if k < clip.shape[0]:
                    ax.imshow(latent_to_rgb(clip[k]), interpolation="nearest")
            axes[i, 0].set_title(name, loc="left", fontsize=8)
        return _save(fig, path)


def plot_adherence(means: dict, spreads: dict, path, baseline: dict | None = None) -> Path:
    variants = list(means)
    x = np.arange(len(variants))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.bar(x, [means[v] for v in variants], yerr=[spreads[v] for v in variants], capsize=3,
               color="tab:blue", label="with control")
        if baseline:
            ax.scatter(x, [baseline[v] for v in variants], color="k", marker="_", s=200, label="no control")
            ax.legend(frameon=False)
        ax.set_xticks(x, variants, rotation=15)
        ax.set_ylabel("edge-map correlation")
        ax.set_ylim(min(0.0, *means.values()), 1.0)
        return _save(fig, path)


def plot_conditioning(first: dict, avg: dict, path) -> Path:
    arms = list(first)
    x = np.arange(len(arms))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.bar(x - 0.2, [first[a] for a in arms], 0.4, label="first frame")
        ax.bar(x + 0.2, [avg[a] for a in arms], 0.4, label="all frames")
        ax.set_xticks(x, arms)
        ax.set_ylabel("MSE to condition frame")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_losses(losses, path, window: int = 50) -> Path:
    """losses: iterable of (step, phase, loss)."""
    rows = np.asarray(list(losses), dtype=np.float64)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        for phase in np.unique(rows[:, 1]):
            sel = rows[rows[:, 1] == phase]
            kernel = np.ones(min(window, len(sel))) / min(window, len(sel))
            ax.plot(sel[:, 0], sel[:, 2], alpha=0.25, lw=0.6)
            ax.plot(sel[len(kernel) - 1:, 0], np.convolve(sel[:, 2], kernel, "valid"), label=f"phase {int(phase)}")
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        return _save(fig, path)
