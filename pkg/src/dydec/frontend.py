"""Cascade of the dyadic tree over a raw waveform.

Each node applies energy-gain normalization to its input, convolves with its
materialized band-pass kernel, adds the unnormalized input back (skip
connection), and decimates by 2 when its depth is a downsampling stage. The
stacked leaf outputs form the time-frequency map, rows ordered low to high by
initial f_low.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import egnorm as eg
from .audio import AudioClip
from .autodiff import GradTape, Var, add, decimate, record, stack_channels
from .filterbank import DyadicTree, kernel_cutoff_gradients, materialize_kernel, SincBandPass

MODES = ("dyadic", "single_scale")
NORM_KINDS = ("egnorm", "batchnorm", "none")


@dataclass
class TFMap:
    """Time-frequency matrix: stacked leaf outputs of the tree."""

    values: np.ndarray  # [bins, frames]
    frame_rate: float

    @property
    def bins(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# Convolution primitive


def _conv_rows(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-length zero-padded convolution of each row with an odd kernel."""
    # Slice the full convolution: unlike mode="same", this stays centered and
    # input-length even when the kernel is longer than the signal.
    half = (kernel.shape[0] - 1) // 2
    n = x.shape[-1]
    if x.ndim == 1:
        return np.convolve(x, kernel)[half : half + n]
    return np.stack([np.convolve(row, kernel)[half : half + n] for row in x])


def _conv_rows_grad_kernel(x: np.ndarray, grad_out: np.ndarray, kernel_len: int) -> np.ndarray:
    """Adjoint of _conv_rows with respect to the kernel."""
    half = (kernel_len - 1) // 2
    rows = x[None, :] if x.ndim == 1 else x
    grads = grad_out[None, :] if grad_out.ndim == 1 else grad_out
    dk = np.zeros(kernel_len)
    for row, g in zip(rows, grads):
        padded = np.pad(row, half)
        dk += np.correlate(padded, g, mode="valid")[::-1]
    return dk


def conv_same(signal: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Centered same-length convolution with zero padding.

    The kernel must have odd length; a unit impulse at the kernel center is
    the identity, and convolving an impulse reproduces the kernel centered at
    the impulse position.
    """
    signal = np.asarray(signal, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 1 or signal.ndim != 1:
        raise ValueError("conv_same takes 1-D signal and kernel")
    if kernel.shape[0] % 2 == 0:
        raise ValueError(f"kernel length must be odd, got {kernel.shape[0]}")
    return _conv_rows(signal, kernel)


# ---------------------------------------------------------------------------
# Traced ops


def conv_op(tape: GradTape | None, x: Var, kernel: Var) -> Var:
    """Row-wise same-convolution of [B, T] (or [T]) with a shared kernel."""
    klen = kernel.data.shape[0]
    if klen % 2 == 0:
        raise ValueError(f"kernel length must be odd, got {klen}")
    x_data, k_data = x.data, kernel.data

    def vjp(g):
        gx = _conv_rows(g, k_data[::-1]) if x.requires_grad else None
        gk = _conv_rows_grad_kernel(x_data, g, klen) if kernel.requires_grad else None
        return (gx, gk)

    return record(tape, _conv_rows(x_data, k_data), (x, kernel), vjp)


def sinc_kernel_op(
    tape: GradTape | None,
    f_low: Var,
    f_high: Var,
    kernel_len: int,
    sample_rate: float,
    window: str,
) -> Var:
    """Materialize a band-pass kernel from cutoff Vars, differentiably."""
    filt = SincBandPass(
        f_low=float(f_low.data),
        f_high=float(f_high.data),
        kernel_len=kernel_len,
        sample_rate=sample_rate,
    )
    kern = materialize_kernel(filt, window=window)

    def vjp(g):
        d_low, d_high = kernel_cutoff_gradients(filt, window=window)
        return (np.sum(g * d_low), np.sum(g * d_high))

    return record(tape, kern, (f_low, f_high), vjp)


def egnorm_op(
    tape: GradTape | None, x: Var, sigma: Var, alpha: Var, delta: Var, gamma: Var
) -> Var:
    params = eg.EgNormParams(
        sigma=float(sigma.data),
        alpha=float(alpha.data),
        delta=float(delta.data),
        gamma=float(gamma.data),
    )
    out, ctx = eg._eg_forward(x.data, params)

    def vjp(g):
        d_signal, d_params = eg.eg_normalize_vjp(x.data, params, g, ctx=ctx)
        return (
            d_signal if x.requires_grad else None,
            d_params["sigma"],
            d_params["alpha"],
            d_params["delta"],
            d_params["gamma"],
        )

    return record(tape, out, (x, sigma, alpha, delta, gamma), vjp)


_BN_EPS = 1e-5


class BatchNormState:
    """Running mean/variance for the batch-standardization ablation."""

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.mean: dict[tuple[int, int], float] = {}
        self.var: dict[tuple[int, int], float] = {}

    def get(self, key: tuple[int, int]) -> tuple[float, float]:
        return self.mean.get(key, 0.0), self.var.get(key, 1.0)

    def update(self, key: tuple[int, int], mean: float, var: float) -> None:
        m = self.momentum
        old_mean, old_var = self.get(key)
        self.mean[key] = m * old_mean + (1.0 - m) * mean
        self.var[key] = m * old_var + (1.0 - m) * var


def batchnorm_op(
    tape: GradTape | None,
    x: Var,
    state: BatchNormState,
    key: tuple[int, int],
    training: bool,
) -> Var:
    """Standardize over (batch, time) with running statistics, no affine."""
    if training:
        mean = float(x.data.mean())
        var = float(x.data.var())
        state.update(key, mean, var)
    else:
        mean, var = state.get(key)
    scale = 1.0 / np.sqrt(var + _BN_EPS)
    y = (x.data - mean) * scale

    def vjp(g):
        if not training:
            return (g * scale,)
        # Adjoint through the batch statistics themselves.
        return (scale * (g - g.mean() - y * (g * y).mean()),)

    return record(tape, y, (x,), vjp)


# ---------------------------------------------------------------------------
# The cascade


def _node_vars(tree: DyadicTree, depth: int, index: int, pvars) -> dict[str, Var]:
    if pvars is not None:
        return pvars[depth - 1][index]
    filt = tree.node(depth, index)
    egp = tree.egnorm_at(depth, index)
    return {
        "f_low": Var(filt.f_low),
        "f_high": Var(filt.f_high),
        "sigma": Var(egp.sigma),
        "alpha": Var(egp.alpha),
        "delta": Var(egp.delta),
        "gamma": Var(egp.gamma),
    }


def _node_block(
    tape,
    x: Var,
    nv: dict[str, Var],
    kernel_len: int,
    sample_rate: float,
    window: str,
    norm: str,
    bn_state,
    bn_key,
    training: bool,
) -> Var:
    if norm == "egnorm":
        normed = egnorm_op(tape, x, nv["sigma"], nv["alpha"], nv["delta"], nv["gamma"])
    elif norm == "batchnorm":
        normed = batchnorm_op(tape, x, bn_state, bn_key, training)
    elif norm == "none":
        normed = x
    else:
        raise ValueError(f"unknown norm {norm!r}, expected one of {NORM_KINDS}")
    kern = sinc_kernel_op(tape, nv["f_low"], nv["f_high"], kernel_len, sample_rate, window)
    return add(tape, conv_op(tape, normed, kern), x)


def run_cascade(
    tape: GradTape | None,
    x: Var,
    tree: DyadicTree,
    pvars=None,
    mode: str = "dyadic",
    norm: str = "egnorm",
    bn_state: BatchNormState | None = None,
    training: bool = False,
) -> Var:
    """Run the front-end over a [B, N] batch Var, returning [B, 2**D, frames].

    `pvars` optionally supplies trainable parameter Vars per node (level
    order, same layout as tree.nodes); without it the tree's stored values are
    used and nothing requires gradients.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
    if norm == "batchnorm" and bn_state is None:
        raise ValueError("batchnorm norm requires a BatchNormState")
    n = x.data.shape[-1]
    total_decim = 2**tree.n_decimations
    if n % total_decim != 0:
        raise ValueError(f"clip length {n} not divisible by total decimation {total_decim}")

    if mode == "single_scale":
        leaves = []
        for i in range(tree.n_leaves):
            nv = _node_vars(tree, tree.depth, i, pvars)
            y = _node_block(
                tape, x, nv, tree.kernel_len, tree.base_sample_rate, tree.window,
                norm, bn_state, (tree.depth, i), training,
            )
            if total_decim > 1:
                y = decimate(tape, y, total_decim)
            leaves.append(y)
        return stack_channels(tape, leaves)

    outputs = [x]  # depth-0: the raw waveform feeds both depth-1 nodes
    for depth in range(1, tree.depth + 1):
        rate = tree.rate_at(depth)
        next_outputs = []
        for i in range(2**depth):
            nv = _node_vars(tree, depth, i, pvars)
            y = _node_block(
                tape, outputs[i // 2], nv, tree.kernel_len, rate, tree.window,
                norm, bn_state, (depth, i), training,
            )
            if depth in tree.downsample_depths:
                y = decimate(tape, y, 2)
            next_outputs.append(y)
        outputs = next_outputs
    return stack_channels(tape, outputs)


def decompose(clip: AudioClip, tree: DyadicTree, mode: str = "dyadic") -> TFMap:
    """Decompose one clip into its time-frequency map (inference path)."""
    if clip.sample_rate != tree.base_sample_rate:
        raise ValueError(
            f"clip rate {clip.sample_rate} != tree base rate {tree.base_sample_rate}"
        )
    out = run_cascade(None, Var(clip.samples[None, :]), tree, mode=mode)
    frame_rate = tree.base_sample_rate / 2**tree.n_decimations
    return TFMap(values=out.data[0], frame_rate=frame_rate)
