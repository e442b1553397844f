"""Report figures rendered to files with the non-interactive Agg backend."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import losses as L  # noqa: E402

plt.rcParams.update({
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
})


def _smooth(y: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(y) < window:
        return y
    kernel = np.ones(window) / window
    return np.convolve(y, kernel, mode="valid")


def plot_training(log_rows, eval_rows, path) -> None:
    """Loss terms (moving average, log scale) and probe redirection error."""
    rows = np.asarray(log_rows, dtype=np.float64)
    fig, (ax_loss, ax_eval) = plt.subplots(1, 2, figsize=(10, 3.6))
    window = max(1, len(rows) // 100)
    it = rows[:, 0]
    cols = ("total",) + L.LOSS_FIELDS
    for name in cols:
        y = rows[:, 2 + (L.LOSS_FIELDS + ("total",)).index(name)]
        if not np.any(y > 0):
            continue
        ys = _smooth(y, window)
        ax_loss.plot(it[len(it) - len(ys):], ys, lw=1.6 if name == "total" else 0.9, label=name)
    ax_loss.set_yscale("log")
    ax_loss.set_xlabel("iteration")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(ncol=2, fontsize=7, frameon=False)
    if eval_rows:
        ev = np.asarray(eval_rows, dtype=np.float64)
        ax_eval.plot(ev[:, 0], ev[:, 1], "o-", ms=3, label="gaze")
        ax_eval.plot(ev[:, 0], ev[:, 2], "s-", ms=3, label="head")
        ax_eval.legend(frameon=False)
    ax_eval.set_xlabel("iteration")
    ax_eval.set_ylabel("probe redirection error (rad)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_layer_weights(weights: np.ndarray, planted_layers, path) -> None:
    """Normalized |P^i_k| per layer, planted layers drawn solid."""
    w = np.abs(np.asarray(weights, dtype=np.float64))
    w = w / w.sum(axis=1, keepdims=True)
    k = w.shape[1]
    fig, axes = plt.subplots(1, len(w), figsize=(3.2 * len(w), 2.8), sharey=True)
    for i, ax in enumerate(np.atleast_1d(axes)):
        colors = ["C0" if j in planted_layers[i] else "0.75" for j in range(k)]
        ax.bar(np.arange(k), w[i], color=colors)
        ax.axhline(1.0 / k, color="k", lw=0.8, ls="--")
        ax.set_xticks(np.arange(k))
        ax.set_xlabel("layer")
        ax.set_title(("gaze", "head")[i] if i < 2 else f"attr {i}")
    np.atleast_1d(axes)[0].set_ylabel("share of |P|")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_error_histograms(errors: dict[str, np.ndarray], path, degrees: bool = False) -> None:
    """One histogram panel per named array of per-sample angular errors."""
    names = list(errors)
    fig, axes = plt.subplots(1, len(names), figsize=(3.2 * len(names), 2.8), squeeze=False)
    for ax, name in zip(axes[0], names):
        vals = np.asarray(errors[name], dtype=np.float64)
        if degrees:
            vals = np.degrees(vals)
        ax.hist(vals, bins=30, color="C0", alpha=0.8)
        ax.axvline(vals.mean(), color="C3", lw=1)
        ax.set_title(name)
        ax.set_xlabel("error (deg)" if degrees else "error (rad)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_correction(pre: np.ndarray, post: np.ndarray, path) -> None:
    fig, ax = plt.subplots(figsize=(3.8, 3.6))
    ax.scatter(pre, post, s=8, alpha=0.6)
    hi = float(max(np.max(pre), np.max(post)))
    ax.plot([0, hi], [0, hi], "k--", lw=0.8)
    ax.set_xlabel("gaze error before correction (rad)")
    ax.set_ylabel("after correction (rad)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_augmentation(rows, path) -> None:
    """Grouped bars of downstream gaze error with and without augmentation."""
    qs = [r.q for r in rows]
    x = np.arange(len(qs))
    fig, ax = plt.subplots(figsize=(4.2, 3.2))
    ax.bar(x - 0.2, [math.degrees(r.raw_err) for r in rows], 0.4, label="raw")
    ax.bar(x + 0.2, [math.degrees(r.aug_err) for r in rows], 0.4, label="aug")
    ax.set_xticks(x)
    ax.set_xticklabels([f"{q}%" for q in qs])
    ax.set_xlabel("labeled share")
    ax.set_ylabel("held-out gaze error (deg)")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_image(path, image: np.ndarray) -> None:
    """Grayscale PNG of a square image with values in [-1, 1]."""
    side = int(round(math.sqrt(image.size)))
    plt.imsave(path, np.asarray(image).reshape(side, side), cmap="gray", vmin=-1, vmax=1)
