"""Ledger files and matplotlib figures rendered next to them.

Every training artifact is accompanied by a tab-separated ledger; the
report helpers turn ledgers into loss curves, decoded genotypes into path
diagrams, and evaluation outputs into disparity image grids.  Figures are
presentation-only: determinism guarantees cover the delimited files, not
the PNGs.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .search import LEDGER_HEADER, LedgerRow


def write_ledger(path, rows) -> None:
    with open(path, "w") as f:
        f.write(LEDGER_HEADER + "\n")
        for r in rows:
            f.write(r.format() + "\n")


def read_ledger(path) -> list:
    rows = []
    with open(path) as f:
        header = f.readline().rstrip("\n")
        if header != LEDGER_HEADER:
            raise ValueError(f"unexpected ledger header {header!r}")
        for line in f:
            epoch, phase, batch, loss, lr = line.rstrip("\n").split("\t")
            rows.append(LedgerRow(int(epoch), phase, int(batch),
                                  float(loss), float(lr)))
    return rows


def save_loss_curve(rows, out_png, title="training loss") -> None:
    """Per-epoch mean loss, one line per ledger phase."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    phases = sorted({r.phase for r in rows})
    for phase in phases:
        by_epoch = {}
        for r in rows:
            if r.phase == phase:
                by_epoch.setdefault(r.epoch, []).append(r.loss)
        epochs = sorted(by_epoch)
        means = [float(np.mean(by_epoch[e])) for e in epochs]
        ax.plot(epochs, means, marker="o", markersize=3, label=phase)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def save_path_figure(genotype, out_png) -> None:
    """Resolution level of each layer for both decoded paths."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3))
    for ax, path, label in ((axes[0], genotype.feature_path, "feature net"),
                            (axes[1], genotype.matching_path, "matching net")):
        xs = range(len(path) + 1)
        ys = (0,) + tuple(path)
        ax.step(xs, ys, where="mid", marker="o")
        for a, b in (genotype.extra_skips if label == "matching net" else ()):
            ax.annotate("", xy=(b, genotype.matching_path[b - 1]),
                        xytext=(a, genotype.matching_path[a - 1]),
                        arrowprops=dict(arrowstyle="->", color="tab:red"))
        ax.set_xlabel("layer")
        ax.set_ylabel("level")
        ax.set_title(label)
        ax.set_ylim(3.5, -0.5)
        ax.set_yticks(range(4))
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def save_disparity_figure(sample, pred, out_png) -> None:
    """Left image, ground truth, prediction, and masked absolute error."""
    fig, axes = plt.subplots(1, 4, figsize=(13, 2.8))
    vmax = max(float(sample.gt.max()), 1.0)
    axes[0].imshow(np.moveaxis(sample.left, 0, -1), interpolation="nearest")
    axes[0].set_title("left")
    im = axes[1].imshow(sample.gt, vmin=0, vmax=vmax, interpolation="nearest")
    axes[1].set_title("ground truth")
    axes[2].imshow(pred, vmin=0, vmax=vmax, interpolation="nearest")
    axes[2].set_title("prediction")
    err = np.where(sample.valid, np.abs(pred - sample.gt), np.nan)
    axes[3].imshow(err, vmin=0, vmax=2.0, cmap="magma", interpolation="nearest")
    axes[3].set_title("abs error (valid)")
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes[1], fraction=0.046)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
