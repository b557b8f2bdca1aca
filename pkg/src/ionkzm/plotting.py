"""Matplotlib figures written next to the CSV outputs (Agg backend, no display)."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_sweep(points, fits: dict, path) -> None:
    """Defect density against quench rate on log axes, one series per anisotropy."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for aniso in sorted({p.anisotropy for p in points}):
        pts = sorted((p for p in points if p.anisotropy == aniso and p.d > 0), key=lambda p: p.gamma)
        if not pts:
            continue
        g = np.array([p.gamma for p in pts])
        d = np.array([p.d for p in pts])
        err = np.array([p.d_stderr for p in pts])
        line = ax.errorbar(g, d, yerr=err, fmt="o", ms=4, capsize=2, label=f"anisotropy {aniso:g}")
        fit = fits.get(aniso)
        if fit is not None:
            gg = np.geomspace(*fit.fit_window, 50)
            ax.plot(gg, fit.amplitude * gg**fit.beta, "-", color=line[0].get_color(),
                    label=f"beta = {fit.beta:.2f} +/- {fit.beta_stderr:.2f}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel(r"$\gamma$ (rad s$^{-2}$)")
    ax.set_ylabel("defect density d")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_quench(snapshots, onset_times, path, omega_weak: float | None = None) -> None:
    """Weak-axis coordinate of every ion through the ramp, onsets marked."""
    t = snapshots.times * 1e6
    x = snapshots.positions[:, :, 0] * 1e6
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(t, x, lw=0.5)
    if onset_times is not None:
        for tt in onset_times:
            if math.isfinite(tt):
                ax.axvline(tt * 1e6, color="0.6", lw=0.5, ls=":")
    ax.set_xlabel("time (us)")
    ax.set_ylabel("weak-axis position (um)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_image(image, path, title: str | None = None) -> None:
    rows, cols = image.shape
    w, h = cols * image.pixel_pitch * 1e6, rows * image.pixel_pitch * 1e6
    fig, ax = plt.subplots(figsize=(6, 2.2))
    ax.imshow(image.pixels, cmap="gray", extent=(-w / 2, w / 2, -h / 2, h / 2))
    ax.set_xlabel("axial (um)")
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_equilibrium(positions, path) -> None:
    """Weak-axis against axial coordinate of an equilibrium crystal."""
    fig, ax = plt.subplots(figsize=(6, 2.5))
    ax.plot(positions[:, 2] * 1e6, positions[:, 0] * 1e6, "o")
    ax.set_xlabel("axial (um)")
    ax.set_ylabel("weak axis (um)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
