"""Figure rendering for evaluation reports, TF maps and training curves.

All figures are written to files (Agg backend); the CLI report path saves
them next to the CSV/JSON outputs.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .frontend import TFMap
from .metrics import StratifiedReport


def plot_stratified_report(report: StratifiedReport, path: str | Path) -> None:
    """MAE / MSE(RMS) / accuracy against the difficulty strata."""
    rows = [r for r in report.rows if r["mae"] is not None]
    labels = [r["stratum"] for r in rows]
    xs = np.arange(len(rows))

    fig, (ax_err, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    ax_err.plot(xs, [r["mae"] for r in rows], "o-", label="MAE")
    ax_err.plot(xs, [r["mse_rms"] for r in rows], "s--", label="MSE (RMS)")
    ax_err.set_xticks(xs, labels, rotation=30, ha="right")
    ax_err.set_xlabel(report.strata_key)
    ax_err.set_ylabel("count error")
    ax_err.legend()
    ax_err.grid(alpha=0.3)

    ax_acc.plot(xs, [r["accu_p0"] for r in rows], "o-", label="AccuRate p=0")
    ax_acc.plot(xs, [r["accu_p1"] for r in rows], "s--", label="AccuRate p=1")
    ax_acc.set_xticks(xs, labels, rotation=30, ha="right")
    ax_acc.set_xlabel(report.strata_key)
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(-0.05, 1.05)
    ax_acc.legend()
    ax_acc.grid(alpha=0.3)

    fig.suptitle(f"counting metrics vs {report.strata_key}")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def plot_tf_map(tf: TFMap, path: str | Path, title: str = "") -> None:
    """Log-magnitude image of a time-frequency map, low bands at the bottom."""
    mag = np.log10(np.abs(tf.values) + 1e-8)
    fig, ax = plt.subplots(figsize=(9, 4))
    im = ax.imshow(
        mag,
        origin="lower",
        aspect="auto",
        cmap="magma",
        extent=(0, tf.frames / tf.frame_rate, 0, tf.bins),
    )
    ax.set_xlabel("time (s)")
    ax.set_ylabel("frequency bin")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, label="log10 |value|")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def plot_history(history: list[dict], path: str | Path) -> None:
    """Loss and MAE curves over training steps."""
    steps = [row["step"] for row in history]
    losses = [row["loss"] for row in history]
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(steps, losses, label="loss", color="tab:blue", alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    eval_rows = [row for row in history if "train_mae" in row]
    if eval_rows:
        ax2 = ax.twinx()
        ax2.plot(
            [r["step"] for r in eval_rows],
            [r["train_mae"] for r in eval_rows],
            "o-",
            color="tab:orange",
            label="train MAE",
        )
        if any("val_mae" in r for r in eval_rows):
            ax2.plot(
                [r["step"] for r in eval_rows if "val_mae" in r],
                [r["val_mae"] for r in eval_rows if "val_mae" in r],
                "s--",
                color="tab:green",
                label="val MAE",
            )
        ax2.set_ylabel("count MAE")
        ax2.legend(loc="upper right")
    ax.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
