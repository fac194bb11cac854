"""Figures for the CLI report paths, rendered off-screen to PNG files."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".png")
    os.close(fd)
    try:
        fig.savefig(tmp, dpi=110, bbox_inches="tight")
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def log_magnitude(spectrum) -> np.ndarray:
    return np.log10(np.abs(np.asarray(spectrum)) + 1e-12)


def plot_spectrum(image, spectrum, path, title="") -> Path:
    """Input image next to its log-magnitude DCT spectrum (DC at top left)."""
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.6))
    a.imshow(image, cmap="gray")
    a.set_title("input")
    mag = log_magnitude(spectrum)
    im = b.imshow(mag, cmap="magma", vmin=max(mag.max() - 6, mag.min()))
    b.set_title("log10 |DCT|")
    b.set_xlabel("v")
    b.set_ylabel("u")
    fig.colorbar(im, ax=b, fraction=0.046)
    for ax in (a, b):
        ax.tick_params(labelsize=7)
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_bench(rows, path) -> Path:
    """Measured DCT time against grid size with N log N and N^2 guides."""
    n = np.array([r.n for r in rows], dtype=float)
    t = np.array([r.seconds for r in rows])
    fig, ax = plt.subplots(figsize=(5, 3.6))
    ax.loglog(n, t * 1e6, "o-", label="dct2 (measured)")
    ref = n * np.log2(np.maximum(n, 2))
    ax.loglog(n, t[0] * 1e6 * ref / ref[0], "--", label="N log N")
    ax.loglog(n, t[0] * 1e6 * (n / n[0]) ** 2, ":", label="N^2")
    ax.set_xlabel("N = H*W")
    ax.set_ylabel("median time (us)")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_report(rows, path, xlabel="config") -> Path:
    """Mean test accuracy per configuration with the per-seed points overlaid."""
    configs = list(dict.fromkeys(r.config for r in rows))
    fig, ax = plt.subplots(figsize=(1.2 * len(configs) + 2.5, 3.6))
    for i, c in enumerate(configs):
        accs = [r.test_acc for r in rows if r.config == c]
        ax.bar(i, np.mean(accs), color="C0", alpha=0.6)
        ax.plot([i] * len(accs), accs, "k.", ms=5)
    ax.set_xticks(range(len(configs)), configs, rotation=20, fontsize=8)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("test accuracy (%)")
    lo = min(r.test_acc for r in rows)
    ax.set_ylim(max(0.0, lo - 10), 100)
    return _save(fig, path)


def plot_history(losses: Sequence[float], accs: Sequence[tuple[int, float]], path) -> Path:
    """Per-step training loss and per-epoch test accuracy."""
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.plot(np.arange(1, len(losses) + 1), losses, lw=0.8, color="C0")
    ax.set_xlabel("step")
    ax.set_ylabel("loss", color="C0")
    if accs:
        ax2 = ax.twinx()
        steps, vals = zip(*accs)
        ax2.plot(steps, vals, "o-", color="C1", ms=3)
        ax2.set_ylabel("test accuracy (%)", color="C1")
        ax2.set_ylim(0, 100)
    return _save(fig, path)
