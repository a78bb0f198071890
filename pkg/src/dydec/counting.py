"""Density-map targets and counting losses.

An event occupying [t_start, t_end] contributes total mass 1, spread over
frames in proportion to temporal overlap, so the vector sum equals the event
count exactly for any frame resolution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class EventLabel:
    """One sound event's occupancy interval in seconds."""

    t_start: float
    t_end: float
    class_id: int | None = None

    def validate(self, clip_len: float) -> None:
        if not (0.0 <= self.t_start < self.t_end <= clip_len + 1e-9):
            raise ValueError(
                f"event [{self.t_start}, {self.t_end}] outside clip of length {clip_len}"
            )


@dataclass
class DensityVector:
    """Per-frame event density; the sum over frames is the event count."""

    values: np.ndarray
    frame_duration: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)


def make_density_target(
    labels: list[EventLabel], frames: int, clip_len: float
) -> DensityVector:
    """Rasterize events into a density vector of the given frame count.

    Each event deposits mass overlap(frame, event) / (t_end - t_start) per
    frame; boundary frames receive fractional mass so every event integrates
    to exactly 1.
    """
    if frames < 1:
        raise ValueError(f"frames must be >= 1, got {frames}")
    frame_dur = clip_len / frames
    values = np.zeros(frames)
    edges = np.arange(frames + 1) * frame_dur
    for ev in labels:
        ev.validate(clip_len)
        overlap = np.minimum(edges[1:], ev.t_end) - np.maximum(edges[:-1], ev.t_start)
        np.maximum(overlap, 0.0, out=overlap)
        values += overlap / (ev.t_end - ev.t_start)
    return DensityVector(values=values, frame_duration=frame_dur)


def count_from_density(density: DensityVector | np.ndarray) -> float:
    values = density.values if isinstance(density, DensityVector) else np.asarray(density)
    return float(np.sum(values))


def mse_density_loss(
    pred: np.ndarray, target: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean squared frame error and its gradient with respect to pred."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff**2))
    return loss, 2.0 * diff / diff.size


def regress_count_head(
    frame_scores: np.ndarray, weight: float = 1.0, bias: float = 0.0
) -> float:
    """Direct-regression ablation: mean-pool frame scores, then affine."""
    return float(np.mean(np.asarray(frame_scores, dtype=np.float64)) * weight + bias)


# ---------------------------------------------------------------------------
# Label file format: JSON lines, one clip per line.


def write_labels_jsonl(path: str | Path, records: list[dict]) -> None:
    """Write per-clip label records: {clip_id, duration_s, events: [...]}. """
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_labels_jsonl(path: str | Path) -> list[dict]:
    """Read label records; each record's events become EventLabel lists."""
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            rec["events"] = [
                EventLabel(
                    t_start=ev["t_start"], t_end=ev["t_end"], class_id=ev.get("class_id")
                )
                for ev in rec["events"]
            ]
            out.append(rec)
    return out


def labels_to_record(clip_id: str, duration_s: float, events: list[EventLabel]) -> dict:
    return {
        "clip_id": clip_id,
        "duration_s": duration_s,
        "events": [
            {"t_start": ev.t_start, "t_end": ev.t_end, "class_id": ev.class_id}
            for ev in events
        ],
    }
