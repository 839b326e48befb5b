"""PNG figures for run reports. Uses the non-interactive Agg backend."""

from __future__ import annotations

import os
from collections import defaultdict
from statistics import median

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path) -> None:
    # savefig infers the format from the suffix, so keep .png on the temp name
    tmp = f"{path}.tmp.png"
    fig.savefig(tmp, dpi=120, bbox_inches="tight")
    plt.close(fig)
    os.replace(tmp, path)


def training_curves(records, path, title: str = "") -> None:
    """Loss and accuracy per epoch from a list of MetricsRecord."""
    epochs = [r.epoch for r in records]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, [r.train_loss for r in records], marker=".")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    ax_acc.plot(epochs, [r.train_accuracy for r in records], marker=".", label="train")
    ax_acc.plot(epochs, [r.test_accuracy for r in records], marker=".", label="test")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.legend()
    if title:
        fig.suptitle(title)
    _save(fig, path)


def lr_grid(results, path) -> None:
    """Final test accuracy per learning rate; ``results`` is [(lr, acc)]."""
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    lrs = [lr for lr, _ in results]
    ax.plot(lrs, [acc for _, acc in results], marker="o")
    ax.set_xscale("log")
    ax.set_xlabel("learning rate")
    ax.set_ylabel("final test accuracy")
    _save(fig, path)


def tradeoff(rows, path) -> None:
    """Accuracy and reconstruction MSE against bottom height, per protocol.

    Points with several seeds are drawn at their median; the dashed line is
    the random-guess baseline. SFA variants get their own lines only when the
    rows list more than one variant per point.
    """
    acc = defaultdict(lambda: defaultdict(list))
    mse = defaultdict(lambda: defaultdict(list))
    base = []
    points = [(r.protocol, r.height, r.seed) for r in rows]
    by_variant = len(set(points)) < len(points)
    for r in rows:
        key = f"{r.protocol} ({r.variant})" if by_variant and r.protocol != "splitnn" else r.protocol
        acc[key][r.height].append(r.test_acc)
        mse[key][r.height].append(r.attack_mse)
        base.append(r.baseline_mse)
    fig, (ax_acc, ax_mse) = plt.subplots(1, 2, figsize=(9, 3.5))
    for key in sorted(acc):
        hs = sorted(acc[key])
        ax_acc.plot(hs, [median(acc[key][h]) for h in hs], marker="o", label=key)
        ax_mse.plot(hs, [median(mse[key][h]) for h in hs], marker="o", label=key)
    if base:
        ax_mse.axhline(median(base), color="grey", linestyle="--", label="random guess")
    ax_acc.set_xlabel("bottom height")
    ax_acc.set_ylabel("test accuracy")
    ax_mse.set_xlabel("bottom height")
    ax_mse.set_ylabel("reconstruction MSE")
    ax_mse.legend(fontsize="small")
    _save(fig, path)

