"""Counting accuracy metrics and polyphony-aware difficulty metrics.

The three difficulty metrics operate on a per-step concurrent-event vector
and are invariant to refining the step grid. Note the counting "MSE" follows
the sound-counting convention of reporting the root of the mean square; it is
labelled "mse_rms" in reports to avoid confusion.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .counting import EventLabel

DEFAULT_STEP_S = 0.01

STRATA_KEYS = ("max_polyp", "ratio_polyp", "mean_polyp")


@dataclass
class PolyphonyVector:
    """Concurrent-event count per uniform time step."""

    p: np.ndarray
    step_duration: float

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.int64)
        if np.any(self.p < 0):
            raise ValueError("polyphony counts must be nonnegative")


def polyphony_vector(
    labels: list[EventLabel], steps: int, clip_len: float
) -> PolyphonyVector:
    """Count events intersecting each half-open step [i*dt, (i+1)*dt)."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    dt = clip_len / steps
    p = np.zeros(steps, dtype=np.int64)
    edges = np.arange(steps + 1) * dt
    for ev in labels:
        hit = (ev.t_start < edges[1:]) & (ev.t_end > edges[:-1])
        p += hit
    return PolyphonyVector(p=p, step_duration=dt)


def polyphony_for_clip(
    labels: list[EventLabel], clip_len: float, step_s: float = DEFAULT_STEP_S
) -> PolyphonyVector:
    return polyphony_vector(labels, max(1, round(clip_len / step_s)), clip_len)


def ratio_polyp(v: PolyphonyVector) -> float:
    """Fraction of steps with at least two concurrent events."""
    return float(np.count_nonzero(v.p >= 2) / len(v.p))


def max_polyp(v: PolyphonyVector) -> int:
    """Peak concurrent-event count."""
    return int(v.p.max()) if len(v.p) else 0


def mean_polyp(v: PolyphonyVector) -> float:
    """Time-averaged excess events beyond one."""
    return float(np.maximum(v.p - 1, 0).sum() / len(v.p))


def mae(y: np.ndarray, y_hat: np.ndarray) -> float:
    y, y_hat = np.asarray(y, dtype=float), np.asarray(y_hat, dtype=float)
    return float(np.mean(np.abs(y - y_hat)))


def mse(y: np.ndarray, y_hat: np.ndarray) -> float:
    """Root of the mean squared count error (reported as MSE by convention)."""
    y, y_hat = np.asarray(y, dtype=float), np.asarray(y_hat, dtype=float)
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def accu_rate(y: np.ndarray, y_hat: np.ndarray, p: int = 0) -> float:
    """Fraction of clips whose rounded prediction is within tolerance p."""
    y, y_hat = np.asarray(y, dtype=float), np.asarray(y_hat, dtype=float)
    return float(np.mean(np.abs(y - np.rint(y_hat)) <= p))


# ---------------------------------------------------------------------------
# Stratified reporting


def clip_difficulty(labels: list[EventLabel], clip_len: float, step_s: float = DEFAULT_STEP_S) -> dict:
    v = polyphony_for_clip(labels, clip_len, step_s)
    return {
        "max_polyp": max_polyp(v),
        "ratio_polyp": ratio_polyp(v),
        "mean_polyp": mean_polyp(v),
    }


@dataclass
class StratifiedReport:
    strata_key: str
    rows: list[dict]  # one per bin: label, lo, hi, n, mae, mse_rms, accu_p0, accu_p1
    global_metrics: dict

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = ["stratum", "lo", "hi", "n", "mae", "mse_rms", "accu_p0", "accu_p1"]
        writer = csv.DictWriter(buf, fieldnames=fields)
        writer.writeheader()
        for row in self.rows:
            out = dict(row)
            for key in ("mae", "mse_rms", "accu_p0", "accu_p1"):
                if out[key] is None:
                    out[key] = "n/a"
            writer.writerow({k: out[k] for k in fields})
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(
            {
                "strata_key": self.strata_key,
                "global": self.global_metrics,
                "bins": self.rows,
            },
            indent=2,
            sort_keys=True,
        )

    def save(self, csv_path: str | Path, json_path: str | Path) -> None:
        Path(csv_path).write_text(self.to_csv())
        Path(json_path).write_text(self.to_json() + "\n")


def _metric_block(y: np.ndarray, y_hat: np.ndarray) -> dict:
    return {
        "mae": mae(y, y_hat),
        "mse_rms": mse(y, y_hat),
        "accu_p0": accu_rate(y, y_hat, 0),
        "accu_p1": accu_rate(y, y_hat, 1),
    }


def _bin_edges(key: str, values: np.ndarray) -> list[tuple[str, float, float]]:
    """Bins: one per integer for max-polyp, observed deciles otherwise."""
    if key == "max_polyp":
        levels = np.arange(int(values.min()), int(values.max()) + 1)
        return [(str(level), level, level + 1) for level in levels]
    edges = np.unique(np.quantile(values, np.linspace(0.0, 1.0, 11)))
    if len(edges) == 1:
        edges = np.array([edges[0], edges[0] + 1e-12])
    out = []
    for i in range(len(edges) - 1):
        out.append((f"[{edges[i]:.4g},{edges[i + 1]:.4g})", edges[i], edges[i + 1]))
    return out


def stratified_report(records: list[dict], strata_key: str) -> StratifiedReport:
    """Per-difficulty-bin metrics over per-clip records.

    Each record needs keys y (true count), y_hat (predicted count) and the
    chosen difficulty key. Empty bins are reported with n=0 and n/a metrics.
    """
    if strata_key not in STRATA_KEYS:
        raise ValueError(f"strata_key must be one of {STRATA_KEYS}, got {strata_key!r}")
    if not records:
        raise ValueError("no records to report on")
    y = np.array([r["y"] for r in records], dtype=float)
    y_hat = np.array([r["y_hat"] for r in records], dtype=float)
    values = np.array([r[strata_key] for r in records], dtype=float)

    rows = []
    bins = _bin_edges(strata_key, values)
    for label, lo, hi in bins:
        last = hi >= bins[-1][2]
        mask = (values >= lo) & ((values <= hi) if last else (values < hi))
        row = {"stratum": label, "lo": float(lo), "hi": float(hi), "n": int(mask.sum())}
        if mask.any():
            row.update(_metric_block(y[mask], y_hat[mask]))
        else:
            row.update({"mae": None, "mse_rms": None, "accu_p0": None, "accu_p1": None})
        rows.append(row)
    return StratifiedReport(
        strata_key=strata_key, rows=rows, global_metrics=_metric_block(y, y_hat)
    )
