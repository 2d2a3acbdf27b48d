"""Figure rendering for training and evaluation runs.

Headless by construction: the Agg backend is selected before pyplot is
imported, so rendering works in CI and over ssh.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_loss_curve(losses, out_path) -> None:
    """Plot per-iteration training loss to a PNG."""
    losses = np.asarray(losses, dtype=np.float64)
    iterations = np.arange(1, losses.size + 1)
    fig, ax = plt.subplots(figsize=(7, 4))
    if losses.size and (losses > 0).all():
        ax.semilogy(iterations, losses, lw=1.0)
    else:
        ax.plot(iterations, losses, lw=1.0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("cross-entropy loss")
    ax.set_title("training loss")
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


def render_eval_summary(rows, acc: float, prec, out_path) -> None:
    """Per-scene accuracy/precision bars with micro-average reference lines.

    rows: dicts with name, accuracy, precision (None when undefined).
    """
    names = [r["name"] for r in rows]
    xs = np.arange(len(rows))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(max(7, 1.2 * len(rows) + 3), 4))

    ax1.bar(xs, [r["accuracy"] for r in rows], color="#4878a8")
    ax1.axhline(acc, color="#c44e52", ls="--", lw=1.2,
                label=f"micro avg {acc:.4f}")
    ax1.set_title("accuracy per scene")
    ax1.set_ylim(0, 1.05)
    ax1.legend(loc="lower right")

    prec_vals = [0.0 if r["precision"] is None else r["precision"] for r in rows]
    bars = ax2.bar(xs, prec_vals, color="#6aa84f")
    for bar, r in zip(bars, rows):
        if r["precision"] is None:
            ax2.text(bar.get_x() + bar.get_width() / 2, 0.02, "n/a",
                     ha="center", va="bottom", fontsize=8, rotation=90)
    if prec is not None:
        ax2.axhline(prec, color="#c44e52", ls="--", lw=1.2,
                    label=f"micro avg {prec:.4f}")
        ax2.legend(loc="lower right")
    ax2.set_title("cloud precision per scene")
    ax2.set_ylim(0, 1.05)

    for ax in (ax1, ax2):
        ax.set_xticks(xs)
        ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
        ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
