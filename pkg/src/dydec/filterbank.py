"""Parameterized sinc band-pass filters arranged as a complete dyadic tree.

Filter cutoffs are stored in Hz on the frequency axis of the raw input
waveform. A node that runs after k decimation stages convolves a signal whose
own rate is base_rate / 2**k; materialization normalizes cutoffs by that local
rate. Normalized cutoffs above 0.5 are deliberately legal: the sampled sinc of
a super-Nyquist cutoff is exactly the folded (aliased) band selector, which is
where the band's content lives after plain keep-every-other-sample decimation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .egnorm import EgNormParams

DEFAULT_KERNEL_LEN = 1025
DEFAULT_LOWPASS_LEN = 63
# Minimum band width (Hz) preserved by cutoff clamping.
BAND_EPS_HZ = 1.0

_TREE_MAGIC = b"DYTR"
_TREE_VERSION = 1
_WINDOWS = ("hamming", "rect")


@dataclass
class SincBandPass:
    """One band-pass node: two trainable cutoffs plus kernel geometry.

    f_low/f_high are in Hz on the raw-input frequency axis; sample_rate is the
    (possibly decimated) rate of the signal this filter convolves.
    """

    f_low: float
    f_high: float
    kernel_len: int
    sample_rate: float

    def validate(self) -> None:
        if self.kernel_len < 1 or self.kernel_len % 2 == 0:
            raise ValueError(f"kernel_len must be odd and positive, got {self.kernel_len}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not (0.0 <= self.f_low < self.f_high):
            raise ValueError(f"need 0 <= f_low < f_high, got ({self.f_low}, {self.f_high})")


def _taper(window: str, length: int) -> np.ndarray:
    if window == "hamming":
        return np.hamming(length)
    if window == "rect":
        return np.ones(length)
    raise ValueError(f"unknown window {window!r}, expected one of {_WINDOWS}")


def _sinc_term(f_hz: float, sample_rate: float, offsets: np.ndarray) -> np.ndarray:
    # 2*f_n*sinc(2*pi*f_n*t) sampled at integer offsets; equals sin(2*pi*f_n*t)/(pi*t)
    # away from t=0 and 2*f_n at t=0.
    f_n = f_hz / sample_rate
    out = np.empty_like(offsets, dtype=np.float64)
    center = offsets == 0
    out[center] = 2.0 * f_n
    t = offsets[~center]
    out[~center] = np.sin(2.0 * np.pi * f_n * t) / (np.pi * t)
    return out


def materialize_kernel(filt: SincBandPass, window: str = "hamming") -> np.ndarray:
    """Render the time-domain kernel for the current cutoffs.

    The kernel is the tapered difference of two sampled sinc low-pass
    prototypes and is exactly symmetric about its center tap.
    """
    filt.validate()
    half = (filt.kernel_len - 1) // 2
    offsets = np.arange(-half, half + 1)
    ideal = _sinc_term(filt.f_high, filt.sample_rate, offsets) - _sinc_term(
        filt.f_low, filt.sample_rate, offsets
    )
    return _taper(window, filt.kernel_len) * ideal


def kernel_cutoff_gradients(
    filt: SincBandPass, window: str = "hamming"
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic per-tap derivatives (d kernel / d f_low, d kernel / d f_high).

    Differentiates the sampled-sinc terms in closed form with the taper held
    fixed: d/df [2 f_n sinc(2 pi f_n t)] = 2 cos(2 pi f_n t) / sample_rate.
    """
    filt.validate()
    half = (filt.kernel_len - 1) // 2
    offsets = np.arange(-half, half + 1)
    w = _taper(window, filt.kernel_len)
    d_high = w * 2.0 * np.cos(2.0 * np.pi * (filt.f_high / filt.sample_rate) * offsets)
    d_low = -w * 2.0 * np.cos(2.0 * np.pi * (filt.f_low / filt.sample_rate) * offsets)
    return d_low / filt.sample_rate, d_high / filt.sample_rate


def clamp_cutoffs(filt: SincBandPass, ceiling_hz: float | None = None) -> SincBandPass:
    """Pull cutoffs back into a feasible band after an optimizer step.

    The default ceiling is the filter's own Nyquist. Tree-level training
    clamps pass the tree band top instead, because deep nodes legitimately
    carry base-axis cutoffs above their local Nyquist (folded bands).
    """
    ceiling = filt.sample_rate / 2.0 if ceiling_hz is None else ceiling_hz
    f_low = min(max(filt.f_low, 0.0), ceiling - BAND_EPS_HZ)
    f_high = min(max(filt.f_high, f_low + BAND_EPS_HZ), ceiling)
    return replace(filt, f_low=f_low, f_high=f_high)


@dataclass
class DyadicTree:
    """Complete binary tree of band-pass nodes with per-node eg-norm params."""

    depth: int
    band_top: float
    base_sample_rate: float
    kernel_len: int
    downsample_depths: frozenset[int]
    window: str
    nodes: list[list[SincBandPass]] = field(default_factory=list)
    egnorm: list[list[EgNormParams]] = field(default_factory=list)

    def node(self, depth: int, index: int) -> SincBandPass:
        return self.nodes[depth - 1][index]

    def egnorm_at(self, depth: int, index: int) -> EgNormParams:
        return self.egnorm[depth - 1][index]

    def decimations_before(self, depth: int) -> int:
        """Number of decimation stages a depth-d node's input has undergone."""
        return len([d for d in self.downsample_depths if d < depth])

    def rate_at(self, depth: int) -> float:
        return self.base_sample_rate / 2 ** self.decimations_before(depth)

    @property
    def n_decimations(self) -> int:
        return len(self.downsample_depths)

    @property
    def n_leaves(self) -> int:
        return 2**self.depth

    def leaves(self) -> list[SincBandPass]:
        return self.nodes[self.depth - 1]

    def iter_nodes(self):
        """Yield (depth, index, filter, egnorm) in level order."""
        for d in range(1, self.depth + 1):
            for i in range(2**d):
                yield d, i, self.nodes[d - 1][i], self.egnorm[d - 1][i]


def default_downsample_depths(depth: int) -> frozenset[int]:
    # Decimate after each of the first five stages (or all, for shallow trees).
    return frozenset(range(1, min(depth, 5) + 1))


def init_dyadic_tree(
    depth: int,
    band_top: float,
    kernel_len: int = DEFAULT_KERNEL_LEN,
    base_sample_rate: float = 24000.0,
    downsample_depths: frozenset[int] | None = None,
    window: str = "hamming",
    egnorm_defaults: EgNormParams | None = None,
) -> DyadicTree:
    """Build a depth-D tree whose bands at depth d evenly tile [0, band_top].

    Filter i at depth d gets f_low = band_top*i/2**d and
    f_high = band_top*(i+1)/2**d, so the two children of every node exactly
    partition the parent band. Eg-norm parameters start at their documented
    defaults on every node.
    """
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    if kernel_len < 1 or kernel_len % 2 == 0:
        raise ValueError(f"kernel_len must be odd and positive, got {kernel_len}")
    if band_top > base_sample_rate / 2.0:
        raise ValueError(
            f"band_top {band_top} exceeds Nyquist {base_sample_rate / 2.0} of the base rate"
        )
    if downsample_depths is None:
        downsample_depths = default_downsample_depths(depth)
    else:
        downsample_depths = frozenset(int(d) for d in downsample_depths)
        if any(d < 1 or d > depth for d in downsample_depths):
            raise ValueError(f"downsample_depths {sorted(downsample_depths)} outside 1..{depth}")
    _taper(window, kernel_len)  # validates the window name
    defaults = egnorm_defaults or EgNormParams()

    tree = DyadicTree(
        depth=depth,
        band_top=float(band_top),
        base_sample_rate=float(base_sample_rate),
        kernel_len=int(kernel_len),
        downsample_depths=downsample_depths,
        window=window,
    )
    for d in range(1, depth + 1):
        rate = tree.rate_at(d)
        row = [
            SincBandPass(
                f_low=band_top * i / 2**d,
                f_high=band_top * (i + 1) / 2**d,
                kernel_len=kernel_len,
                sample_rate=rate,
            )
            for i in range(2**d)
        ]
        tree.nodes.append(row)
        tree.egnorm.append([replace(defaults) for _ in range(2**d)])
    return tree


def save_tree(path: str | Path, tree: DyadicTree) -> None:
    """Write the tree as a flat little-endian binary record plus a JSON sidecar."""
    path = Path(path)
    ds = sorted(tree.downsample_depths)
    head = struct.pack(
        "<4sIIIddB",
        _TREE_MAGIC,
        _TREE_VERSION,
        tree.depth,
        tree.kernel_len,
        tree.base_sample_rate,
        tree.band_top,
        _WINDOWS.index(tree.window),
    )
    body = [head, struct.pack(f"<I{len(ds)}I", len(ds), *ds)]
    for _, _, filt, eg in tree.iter_nodes():
        body.append(
            struct.pack(
                "<6d", filt.f_low, filt.f_high, eg.sigma, eg.alpha, eg.delta, eg.gamma
            )
        )
    path.write_bytes(b"".join(body))

    sidecar = {
        "format": "dydec-tree",
        "version": _TREE_VERSION,
        "depth": tree.depth,
        "kernel_len": tree.kernel_len,
        "base_sample_rate": tree.base_sample_rate,
        "band_top": tree.band_top,
        "window": tree.window,
        "downsample_depths": ds,
        "nodes": [
            {
                "depth": d,
                "index": i,
                "f_low": filt.f_low,
                "f_high": filt.f_high,
                "sample_rate": filt.sample_rate,
                "egnorm": {"sigma": eg.sigma, "alpha": eg.alpha, "delta": eg.delta, "gamma": eg.gamma},
            }
            for d, i, filt, eg in tree.iter_nodes()
        ],
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_tree(path: str | Path) -> DyadicTree:
    """Read a tree record written by save_tree."""
    raw = Path(path).read_bytes()
    head_size = struct.calcsize("<4sIIIddB")
    magic, version, depth, kernel_len, base_rate, band_top, window_idx = struct.unpack(
        "<4sIIIddB", raw[:head_size]
    )
    if magic != _TREE_MAGIC:
        raise ValueError(f"{path}: not a dydec tree record")
    if version != _TREE_VERSION:
        raise ValueError(f"{path}: unsupported tree record version {version}")
    offset = head_size
    (n_ds,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    ds = struct.unpack_from(f"<{n_ds}I", raw, offset)
    offset += 4 * n_ds

    tree = init_dyadic_tree(
        depth=depth,
        band_top=band_top,
        kernel_len=kernel_len,
        base_sample_rate=base_rate,
        downsample_depths=frozenset(ds),
        window=_WINDOWS[window_idx],
    )
    for d in range(1, depth + 1):
        for i in range(2**d):
            f_low, f_high, sigma, alpha, delta, gamma = struct.unpack_from("<6d", raw, offset)
            offset += 48
            node = tree.nodes[d - 1][i]
            node.f_low, node.f_high = f_low, f_high
            tree.egnorm[d - 1][i] = EgNormParams(sigma=sigma, alpha=alpha, delta=delta, gamma=gamma)
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes in tree record")
    return tree
