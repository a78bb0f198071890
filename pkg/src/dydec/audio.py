"""Mono audio buffers and 16-bit PCM WAV file I/O."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Symmetric scale so that write->read round-trips full-scale samples.
_PCM16_SCALE = 32767.0


@dataclass
class AudioClip:
    """A mono sample buffer tagged with its sampling rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"expected a mono 1-D buffer, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        """Clip length in seconds."""
        return len(self) / self.sample_rate


def write_wav(path: str | Path, clip: AudioClip) -> None:
    """Write a clip as mono 16-bit little-endian PCM.

    Samples are clipped to [-1, 1] before quantization. Output bytes are a
    pure function of the input, so identical clips produce identical files.
    """
    pcm = np.clip(clip.samples, -1.0, 1.0)
    pcm = np.round(pcm * _PCM16_SCALE).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(clip.sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path: str | Path) -> AudioClip:
    """Read a mono 16-bit PCM WAV file into float64 samples in [-1, 1]."""
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise ValueError(f"{path}: only mono WAV is supported")
        if fh.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / _PCM16_SCALE
    return AudioClip(samples=samples, sample_rate=rate)
