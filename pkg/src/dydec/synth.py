"""Deterministic synthetic acoustic scenes in a free-field open area.

Each event places a seed waveform at a 3-D position; the mix applies the
propagation delay (distance over 343 m/s) and spherical 1/r attenuation with
a 1 m distance floor, then optionally adds white noise at an SNR drawn from a
two-mean Gaussian mixture. Seeds are procedurally generated harmonic chirps
standing in for downloadable sample clips; real seed WAVs can be supplied
instead via configuration.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import AudioClip, read_wav, write_wav
from .counting import EventLabel, labels_to_record, write_labels_jsonl
from .metrics import DEFAULT_STEP_S, max_polyp, polyphony_for_clip

SPEED_OF_SOUND = 343.0  # m/s
MIN_DISTANCE = 1.0  # m, attenuation floor
MAX_SEED_DURATION = 1.5  # s

DEFAULT_AREA = (100.0, 100.0, 100.0)
DEFAULT_MIC = (50.0, 50.0, 1.0)
DEFAULT_SNR_MEANS = (-33.0, -20.0)


@dataclass
class SnrSpec:
    """Noise policy: 'mixture' of Gaussian SNR modes, 'fixed', or 'none'."""

    mode: str = "mixture"
    means_db: tuple[float, float] = DEFAULT_SNR_MEANS
    std_db: float = 1.0
    weights: tuple[float, float] = (0.5, 0.5)
    fixed_db: float = 0.0

    def draw(self, rng: np.random.Generator) -> float | None:
        if self.mode == "none":
            return None
        if self.mode == "fixed":
            return float(self.fixed_db)
        if self.mode == "mixture":
            idx = rng.choice(len(self.means_db), p=np.asarray(self.weights) / sum(self.weights))
            return float(rng.normal(self.means_db[idx], self.std_db))
        raise ValueError(f"unknown snr mode {self.mode!r}")


@dataclass
class SceneEvent:
    seed_id: int
    position: tuple[float, float, float]
    start_s: float
    gain: float = 1.0


@dataclass
class SceneSpec:
    """Generative description of one synthetic clip."""

    events: list[SceneEvent]
    duration_s: float = 5.0
    sample_rate: int = 24000
    area: tuple[float, float, float] = DEFAULT_AREA
    mic: tuple[float, float, float] = DEFAULT_MIC
    snr: SnrSpec = field(default_factory=SnrSpec)
    rng_seed: int = 0

    def validate(self) -> None:
        for ev in self.events:
            if not all(0.0 <= p <= dim for p, dim in zip(ev.position, self.area)):
                raise ValueError(f"event position {ev.position} outside area {self.area}")
            if not 0.0 <= ev.start_s < self.duration_s:
                raise ValueError(f"event start {ev.start_s} outside clip")


@dataclass
class SeedSound:
    """A rendered seed template, peak-normalized to 1."""

    seed_id: int
    params: dict
    template: np.ndarray
    sample_rate: int

    @property
    def duration(self) -> float:
        return len(self.template) / self.sample_rate


# Four harmonic-chirp families; distinct spectra for heterophony tests.
_CHIRP_FAMILIES = [
    {"f0": 600.0, "f1": 350.0, "dur": 0.9, "harmonics": 4, "am_hz": 3.0, "am_depth": 0.3, "decay": 2.0},
    {"f0": 1400.0, "f1": 2600.0, "dur": 0.5, "harmonics": 2, "am_hz": 9.0, "am_depth": 0.5, "decay": 1.0},
    {"f0": 2900.0, "f1": 3100.0, "dur": 0.35, "harmonics": 1, "am_hz": 25.0, "am_depth": 0.6, "decay": 0.5},
    {"f0": 320.0, "f1": 640.0, "dur": 1.2, "harmonics": 6, "am_hz": 5.0, "am_depth": 0.4, "decay": 1.5},
]

_ATTACK_S = 0.02


def _render_chirp(params: dict, sample_rate: int) -> np.ndarray:
    n = round(params["dur"] * sample_rate)
    t = np.arange(n) / sample_rate
    sweep = params["f0"] * t + (params["f1"] - params["f0"]) * t**2 / (2.0 * params["dur"])
    sig = np.zeros(n)
    for h in range(1, params["harmonics"] + 1):
        sig += np.sin(2.0 * np.pi * h * sweep) / h
    env = np.minimum(t / _ATTACK_S, 1.0) * np.exp(-params["decay"] * t)
    env *= (1.0 + params["am_depth"] * np.sin(2.0 * np.pi * params["am_hz"] * t)) / (
        1.0 + params["am_depth"]
    )
    sig *= env
    return sig / np.max(np.abs(sig))


def build_seed_bank(
    sample_rate: int, class_ids: list[int], seed_wavs: list[str] | None = None
) -> dict[int, SeedSound]:
    """Render procedural seeds, or load real seed WAVs when provided."""
    bank = {}
    for cid in class_ids:
        if seed_wavs is not None:
            clip = read_wav(seed_wavs[cid])
            if clip.sample_rate != sample_rate:
                raise ValueError(f"seed wav {seed_wavs[cid]} rate {clip.sample_rate} != {sample_rate}")
            template = clip.samples[: round(MAX_SEED_DURATION * sample_rate)]
            template = template / np.max(np.abs(template))
            params = {"source": seed_wavs[cid]}
        else:
            params = _CHIRP_FAMILIES[cid % len(_CHIRP_FAMILIES)]
            template = _render_chirp(params, sample_rate)
        if len(template) / sample_rate > MAX_SEED_DURATION:
            raise ValueError(f"seed {cid} longer than {MAX_SEED_DURATION}s")
        bank[cid] = SeedSound(seed_id=cid, params=dict(params), template=template, sample_rate=sample_rate)
    return bank


@dataclass
class RenderResult:
    clip: AudioClip
    labels: list[EventLabel]
    clean: np.ndarray
    noise: np.ndarray
    snr_db: float | None


def render_scene(spec: SceneSpec, seeds: dict[int, SeedSound] | None = None) -> RenderResult:
    """Mix a scene's events into one clip with free-field propagation.

    Labels carry the post-delay occupancy interval of each event, quantized
    to the sample grid so audio and labels agree exactly. The mixed clip is
    rescaled globally if its peak exceeds 1 (this preserves the SNR). Without
    an explicit seed bank, procedural seeds are built for the referenced ids.
    """
    spec.validate()
    if seeds is None:
        seeds = build_seed_bank(spec.sample_rate, sorted({ev.seed_id for ev in spec.events}))
    n = round(spec.duration_s * spec.sample_rate)
    clean = np.zeros(n)
    labels = []
    mic = np.asarray(spec.mic)
    for ev in spec.events:
        seed = seeds[ev.seed_id]
        distance = float(np.linalg.norm(np.asarray(ev.position) - mic))
        delay_s = distance / SPEED_OF_SOUND
        gain = ev.gain / max(distance, MIN_DISTANCE)
        start_idx = round((ev.start_s + delay_s) * spec.sample_rate)
        stop_idx = start_idx + len(seed.template)
        if start_idx < 0 or stop_idx > n:
            raise ValueError(
                f"event delayed to [{start_idx / spec.sample_rate:.3f}, "
                f"{stop_idx / spec.sample_rate:.3f}]s exits the {spec.duration_s}s clip"
            )
        clean[start_idx:stop_idx] += gain * seed.template
        labels.append(
            EventLabel(
                t_start=start_idx / spec.sample_rate,
                t_end=stop_idx / spec.sample_rate,
                class_id=ev.seed_id,
            )
        )

    rng = np.random.default_rng(spec.rng_seed)
    snr_db = spec.snr.draw(rng)
    if snr_db is None or not np.any(clean):
        noise = np.zeros(n)
    else:
        p_signal = float(np.mean(clean**2))
        noise = rng.standard_normal(n) * np.sqrt(p_signal * 10.0 ** (-snr_db / 10.0))
    mix = clean + noise
    peak = np.max(np.abs(mix)) if len(mix) else 0.0
    if peak > 1.0:
        mix, clean, noise = mix / peak, clean / peak, noise / peak
    return RenderResult(
        clip=AudioClip(samples=mix, sample_rate=spec.sample_rate),
        labels=labels,
        clean=clean,
        noise=noise,
        snr_db=snr_db,
    )


@dataclass
class SynthConfig:
    """Dataset generation settings: quotas are clip counts per max-polyp level."""

    quotas: dict[int, int]
    classes: list[int] = field(default_factory=lambda: [0])
    seed: int = 0
    duration_s: float = 5.0
    sample_rate: int = 24000
    max_events: int = 8
    area: tuple[float, float, float] = DEFAULT_AREA
    mic: tuple[float, float, float] = DEFAULT_MIC
    snr: SnrSpec = field(default_factory=SnrSpec)
    seed_wavs: list[str] | None = None
    step_s: float = DEFAULT_STEP_S

    def to_jsonable(self) -> dict:
        return {
            "quotas": {str(k): v for k, v in self.quotas.items()},
            "classes": list(self.classes),
            "seed": self.seed,
            "duration_s": self.duration_s,
            "sample_rate": self.sample_rate,
            "max_events": self.max_events,
            "area": list(self.area),
            "mic": list(self.mic),
            "snr": {
                "mode": self.snr.mode,
                "means_db": list(self.snr.means_db),
                "std_db": self.snr.std_db,
                "weights": list(self.snr.weights),
                "fixed_db": self.snr.fixed_db,
            },
            "seed_wavs": self.seed_wavs,
            "step_s": self.step_s,
        }


def _draw_scene(config: SynthConfig, seeds, candidate_idx: int) -> SceneSpec:
    """Deterministic candidate scene from (dataset seed, candidate index)."""
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, candidate_idx)))
    n_events = int(rng.integers(1, config.max_events + 1))
    mic = np.asarray(config.mic)
    events = []
    for _ in range(n_events):
        for _attempt in range(64):
            position = tuple(rng.uniform(0.0, dim) for dim in config.area)
            distance = float(np.linalg.norm(np.asarray(position) - mic))
            delay_s = distance / SPEED_OF_SOUND
            seed_id = int(rng.choice(config.classes))
            window = config.duration_s - delay_s - seeds[seed_id].duration
            if window > 1.0 / config.sample_rate:
                events.append(
                    SceneEvent(
                        seed_id=seed_id,
                        position=position,
                        start_s=float(rng.uniform(0.0, window)),
                    )
                )
                break
        else:
            raise ValueError("cannot place event: seed too long for the clip duration")
    return SceneSpec(
        events=events,
        duration_s=config.duration_s,
        sample_rate=config.sample_rate,
        area=config.area,
        mic=config.mic,
        snr=config.snr,
        rng_seed=int(rng.integers(0, 2**63 - 1)),
    )


def generate_dataset(config: SynthConfig, out_dir: str | Path) -> dict:
    """Rejection-sample scenes until every max-polyp quota is met.

    Writes WAV clips, labels.jsonl and manifest.json. Regeneration with the
    same config is byte-identical: every candidate draws from an RNG stream
    keyed by (seed, candidate index), and acceptance depends only on labels.
    """
    if any(level > config.max_events for level in config.quotas):
        raise ValueError(
            f"unsatisfiable quota: max-polyp levels {sorted(config.quotas)} "
            f"exceed the event budget {config.max_events}"
        )
    if any(level < 1 or count < 0 for level, count in config.quotas.items()):
        raise ValueError("quota levels must be >= 1 with nonnegative counts")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = build_seed_bank(config.sample_rate, list(config.classes), config.seed_wavs)

    remaining = dict(config.quotas)
    total = sum(config.quotas.values())
    max_attempts = max(20000, 4000 * total)
    accepted: list[tuple[SceneSpec, int]] = []
    candidate = 0
    while sum(remaining.values()) > 0:
        if candidate >= max_attempts:
            raise RuntimeError(
                f"quota not satisfiable within {max_attempts} candidate scenes; "
                f"still missing {remaining}"
            )
        spec = _draw_scene(config, seeds, candidate)
        candidate += 1
        labels = _spec_labels(spec, seeds)
        level = max_polyp(polyphony_for_clip(labels, config.duration_s, config.step_s))
        if remaining.get(level, 0) > 0:
            remaining[level] -= 1
            accepted.append((spec, level))

    label_records = []
    clip_rows = []
    for k, (spec, level) in enumerate(accepted):
        clip_id = f"clip_{k:04d}"
        result = render_scene(spec, seeds)
        write_wav(out_dir / f"{clip_id}.wav", result.clip)
        label_records.append(labels_to_record(clip_id, spec.duration_s, result.labels))
        clip_rows.append(
            {
                "clip_id": clip_id,
                "wav": f"{clip_id}.wav",
                "n_events": len(result.labels),
                "max_polyp": level,
                "snr_db": result.snr_db,
            }
        )
    write_labels_jsonl(out_dir / "labels.jsonl", label_records)
    manifest = {
        "config": config.to_jsonable(),
        "n_clips": len(accepted),
        "clips": clip_rows,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _spec_labels(spec: SceneSpec, seeds: dict[int, SeedSound]) -> list[EventLabel]:
    """Labels a render would emit, without rendering audio (used for rejection)."""
    mic = np.asarray(spec.mic)
    labels = []
    n = round(spec.duration_s * spec.sample_rate)
    for ev in spec.events:
        seed = seeds[ev.seed_id]
        distance = float(np.linalg.norm(np.asarray(ev.position) - mic))
        start_idx = round((ev.start_s + distance / SPEED_OF_SOUND) * spec.sample_rate)
        stop_idx = start_idx + len(seed.template)
        if start_idx < 0 or stop_idx > n:
            raise ValueError("event delayed outside the clip")
        labels.append(
            EventLabel(
                t_start=start_idx / spec.sample_rate,
                t_end=stop_idx / spec.sample_rate,
                class_id=ev.seed_id,
            )
        )
    return labels


def dataset_digest(dataset_dir: str | Path) -> dict[str, str]:
    """SHA-256 of every file in a dataset directory (regeneration checks)."""
    out = {}
    for path in sorted(Path(dataset_dir).iterdir()):
        if path.is_file():
            out[path.name] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out
