"""Figure rendering for the command line reports.

Everything draws through the Agg backend and writes straight to files, so
the commands work headless.  Figures accompany the delimited outputs; they
are never the primary artifact.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

FIG_DPI = 120


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=FIG_DPI)
    plt.close(fig)


def save_label_hist(y: np.ndarray, path, threshold: float | None = None) -> None:
    """Histogram of delivery hours, with the head/tail threshold marked."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(y, bins=60, color="#4878cf", edgecolor="white", linewidth=0.3)
    if threshold is not None:
        ax.axvline(threshold, color="#d1022f", linestyle="--", linewidth=1.2,
                   label=f"threshold {threshold:g} h")
        ax.legend()
    ax.set_xlabel("delivery hours")
    ax.set_ylabel("orders")
    ax.set_yscale("log")
    _finish(fig, path)


def save_training_curves(log_rows: list[dict], path) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    epochs = [r["epoch"] for r in log_rows]
    ax1.plot(epochs, [r["train_loss"] for r in log_rows], marker="o", markersize=3)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss")
    ax2.plot(epochs, [r["val_mae"] for r in log_rows], marker="o", markersize=3,
             color="#d17802")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation MAE (h)")
    _finish(fig, path)


def save_pred_scatter(y: np.ndarray, yhat: np.ndarray, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(y, yhat, s=6, alpha=0.4, linewidths=0)
    lim = max(float(np.max(y)), float(np.max(yhat)), 1.0)
    ax.plot([0, lim], [0, lim], color="#888888", linewidth=0.8)
    ax.set_xlabel("actual hours")
    ax.set_ylabel("predicted hours")
    _finish(fig, path)


def save_error_hist(y: np.ndarray, yhat: np.ndarray, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(np.asarray(yhat) - np.asarray(y), bins=60, color="#6a9f58",
            edgecolor="white", linewidth=0.3)
    ax.axvline(0.0, color="#444444", linewidth=0.8)
    ax.set_xlabel("prediction error (h)")
    ax.set_ylabel("orders")
    _finish(fig, path)


def save_variant_bars(names: list[str], maes: list[float], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(names, maes, color="#4878cf")
    ax.set_ylabel("test MAE (h)")
    ax.tick_params(axis="x", rotation=20)
    _finish(fig, path)


def save_sweep_curve(param: str, values: list[float], maes: list[float], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(values, maes, marker="o")
    ax.set_xlabel(param)
    ax.set_ylabel("validation MAE (h)")
    _finish(fig, path)
