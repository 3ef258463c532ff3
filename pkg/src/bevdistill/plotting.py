"""Figures written next to the CSV outputs. Uses the non-interactive backend."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_NAMES = ("l_det", "l_fea", "l_rel", "l_resp", "total")


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_losses(metrics: Sequence[tuple], path, title: str = "") -> Path:
    """Per-step loss curves; distillation terms that stay at zero are skipped."""
    arr = np.asarray(metrics, dtype=float).reshape(-1, 1 + len(LOSS_NAMES))
    fig, ax = plt.subplots(figsize=(6, 4))
    for k, name in enumerate(LOSS_NAMES, start=1):
        if name != "l_det" and name != "total" and not arr[:, k].any():
            continue
        ax.plot(arr[:, 0], arr[:, k], label=name, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if len(arr) and (arr[:, 1:] > 0).all():
        ax.set_yscale("log")
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def plot_heatmap(img: np.ndarray, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    im = ax.imshow(img, cmap="gray", origin="upper")
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_title(title)
    return _save(fig, path)


def plot_class_ap(report, path, class_names: Sequence[str] | None = None) -> Path:
    ids = list(report.class_ids)
    aps = [report.class_ap(c) for c in ids]
    names = [class_names[c] if class_names else str(c) for c in ids]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(names, np.nan_to_num(aps))
    ax.set_ylim(0, 1)
    ax.set_ylabel("AP")
    ax.set_title(f"mAP {report.mAP:.3f}")
    return _save(fig, path)


def plot_ablation(rows, path, title: str = "") -> Path:
    """Mean mAP per variant with the per-seed spread as error bars."""
    by_variant: dict[str, list[float]] = defaultdict(list)
    for r in rows:
        by_variant[r.variant].append(r.summary.map)
    names = list(by_variant)
    means = [np.mean(by_variant[n]) for n in names]
    spread = [np.std(by_variant[n]) for n in names]
    fig, ax = plt.subplots(figsize=(max(4, 1.1 * len(names)), 3.5))
    ax.bar(names, means, yerr=spread, capsize=3)
    ax.set_ylabel("mAP")
    ax.set_title(title)
    ax.tick_params(axis="x", labelrotation=30)
    return _save(fig, path)
