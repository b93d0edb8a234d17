"""Figures written next to the CSV/JSON reports (Agg backend, files only)."""

from __future__ import annotations

import os
import tempfile

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .analysis import edge_model  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "xtick.direction": "in",
    "ytick.direction": "in",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}
# fixed PNG metadata keeps repeated runs byte-identical
_META = {"Software": None}


def _save(fig, path) -> None:
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".png")
    os.close(fd)
    try:
        fig.savefig(tmp, format="png", metadata=_META)
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.unlink(tmp)


def plot_image(grid, path, title="", label="counts / pixel") -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3.4))
        h, w = grid.counts.shape
        extent = (0, w * grid.pixel_pitch, h * grid.pixel_pitch, 0)
        im = ax.imshow(grid.counts, cmap="inferno", extent=extent, interpolation="nearest")
        ax.set_xlabel("x (µm)")
        ax.set_ylabel("y (µm)")
        ax.set_title(title or f"{grid.frames_accumulated} frames")
        fig.colorbar(im, ax=ax, label=label)
        _save(fig, path)


def plot_histogram(hist, path, delay=None) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 2.8))
        ax.step(hist.centers / 1000, hist.counts, where="mid", lw=0.8)
        if delay is not None:
            ax.axvline(delay / 1000, color="C3", lw=0.8, ls="--", label=f"delay {delay:.0f} ps")
            ax.legend()
        ax.set_xlabel("idler - signal lag (ns)")
        ax.set_ylabel("pairs / bin")
        _save(fig, path)


def plot_snr_curve(frames, values, fit, path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 2.8))
        ax.plot(frames, values, ".", ms=2, label="SNR")
        if fit is not None:
            xs = np.linspace(1, max(frames), 200)
            ax.plot(xs, fit.A * np.sqrt(xs), "C3",
                    label=f"{fit.A:.3g}·√N, R²={fit.r_squared:.3f}")
        ax.set_xlabel("accumulated frames")
        ax.set_ylabel("SNR")
        ax.legend()
        _save(fig, path)


def plot_edge_fits(scans, fits, path, max_panels: int = 6) -> None:
    """Overlay of a few linescans with their fits, plus the spread of widths."""
    with plt.rc_context(STYLE):
        fig, (ax, bx) = plt.subplots(1, 2, figsize=(7, 2.8))
        for k, (scan, fit) in enumerate(list(zip(scans, fits))[:max_panels]):
            color = f"C{k % 10}"
            err = np.sqrt(np.maximum(scan.counts, 1))
            ax.errorbar(scan.positions, scan.counts, err, fmt=".", ms=3, color=color, lw=0.5)
            xs = np.linspace(scan.positions[0], scan.positions[-1], 200)
            ax.plot(xs, edge_model(xs, fit.params), color=color, lw=0.8)
        ax.set_xlabel("position (µm)")
        ax.set_ylabel("counts")
        sig = [f.sigma_res for f in fits]
        se = [f.stderr["sigma_res"] for f in fits]
        bx.errorbar(np.arange(len(sig)), sig, se, fmt="o", ms=3, lw=0.8)
        if sig:
            bx.axhline(np.mean(sig), color="C3", lw=0.8)
        bx.set_xlabel("linescan")
        bx.set_ylabel("σ_res (µm)")
        _save(fig, path)
