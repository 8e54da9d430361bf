"""PNG figures for the analyze and bench reports (Agg backend, no display)."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import SUBSAMPLING, LengthErrorHistogram  # noqa: E402


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_length_histogram(hist: LengthErrorHistogram, path) -> None:
    rows = hist.rows()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if rows:
        keys, counts = zip(*rows)
        ax.bar(keys, np.asarray(counts) / hist.total, color="tab:blue", width=0.8)
    ax.set_xlabel("T - T'")
    ax.set_ylabel("fraction of utterances")
    ax.set_title(f"length error (miss {hist.miss_fraction:.1%})")
    _save(fig, path)


def plot_spikes(nonblank: np.ndarray, positions: Sequence[int],
                boundaries: Sequence[tuple[int, int]] | None, beta: float, path) -> None:
    """Non-blank posterior over feature time with token intervals shaded."""
    fig, ax = plt.subplots(figsize=(7, 2.6))
    t = (np.arange(len(nonblank)) + 0.5) * SUBSAMPLING
    ax.plot(t, nonblank, color="black", lw=1)
    ax.plot(t[list(positions)], nonblank[list(positions)], "o", color="tab:red", ms=4)
    ax.axhline(beta, color="tab:gray", ls=":", lw=1)
    for s, e in boundaries or []:
        ax.axvspan(s, e, color="tab:green", alpha=0.2, lw=0)
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("feature frame")
    ax.set_ylabel("1 - p(blank)")
    _save(fig, path)


def plot_attention(weights: np.ndarray, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 2.8))
    ax.imshow(weights, aspect="auto", origin="lower", cmap="viridis", interpolation="nearest")
    ax.set_xlabel("encoder frame")
    ax.set_ylabel("decoder slot")
    _save(fig, path)


def plot_beta_sweep(rows: Sequence[dict], path) -> None:
    betas = [r["beta"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(betas, [r["cer"] for r in rows], "o-", label="CER")
    ax.plot(betas, [r["miss"] for r in rows], "s--", label="miss fraction")
    ax.set_xlabel("beta")
    ax.set_ylim(bottom=0)
    ax.legend()
    ax2 = ax.twinx()
    ax2.plot(betas, [r["rtf"] for r in rows], "^:", color="tab:red")
    ax2.set_ylabel("RTF", color="tab:red")
    ax2.set_ylim(bottom=0)
    _save(fig, path)
