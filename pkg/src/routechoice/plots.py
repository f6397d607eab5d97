"""Static figures for the ``report`` command. Core modules never import this."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def training_curves(rows: list[dict], path) -> str:
    """One panel per logged quantity against iteration (or epoch)."""
    x_key = "iter" if "iter" in rows[0] else "epoch"
    keys = [k for k in rows[0] if k != x_key]
    fig, axes = plt.subplots(1, len(keys), figsize=(3.2 * len(keys), 2.8), squeeze=False)
    x = [float(r[x_key]) for r in rows]
    for ax, k in zip(axes[0], keys):
        ax.plot(x, [float(r[k]) for r in rows], lw=1)
        ax.set_xlabel(x_key)
        ax.set_title(k, fontsize=9)
    return _save(fig, path)


def metric_bars(metrics: dict, path) -> str:
    names = [k for k in ("ED", "BLEU", "JSD", "LP") if k in metrics]
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 1.5, 2.8))
    ax.bar(names, [metrics[k] for k in names], color="0.4")
    ax.axhline(0, color="k", lw=0.5)
    return _save(fig, path)


def flow_scatter(predicted: np.ndarray, observed: np.ndarray, path, r2: float | None = None) -> str:
    fig, ax = plt.subplots(figsize=(3.4, 3.4))
    ax.scatter(observed, predicted, s=8, alpha=0.6)
    hi = float(max(np.max(observed), np.max(predicted), 1.0))
    ax.plot([0, hi], [0, hi], color="k", lw=0.5)
    ax.set_xlabel("observed flow")
    ax.set_ylabel("assigned flow")
    if r2 is not None:
        ax.set_title(f"R2 = {r2:.3f}", fontsize=9)
    return _save(fig, path)


def attribution_bars(names: list[str], mean_abs: list[float], path) -> str:
    order = np.argsort(mean_abs)
    fig, ax = plt.subplots(figsize=(4.5, 0.25 * len(names) + 1.0))
    ax.barh([names[i] for i in order], [mean_abs[i] for i in order], color="0.4")
    ax.set_xlabel("mean |Shapley value|")
    return _save(fig, path)
