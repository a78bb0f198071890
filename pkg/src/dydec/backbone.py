"""Backbone: framewise reduction of the time-frequency map.

Stages alternate per-channel strided low-pass pooling (one trainable cutoff
per channel) with width-3 cross-channel convolutions and ReLU. A final
per-frame affine map plus softplus yields one nonnegative score per output
frame; under the density head those scores are the predicted density vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import GradTape, Var, record, relu, softplus
from .filterbank import (
    DEFAULT_LOWPASS_LEN,
    SincBandPass,
    kernel_cutoff_gradients,
    materialize_kernel,
)
from .frontend import TFMap, _conv_rows, _conv_rows_grad_kernel

# (stride, out_channels) per stage; stride None means no pooling step.
DEFAULT_PLAN = ((5, 512), (5, 1024), (3, 512), (None, 256))


@dataclass
class BackboneStage:
    stride: int | None
    cutoffs: np.ndarray | None  # [C_in] Hz at the stage input rate, None if stride is None
    weight: np.ndarray  # [C_out, C_in, 3]
    bias: np.ndarray  # [C_out]


@dataclass
class BackboneParams:
    stages: list[BackboneStage]
    out_weight: np.ndarray  # [C_last]
    out_bias: np.ndarray  # scalar
    input_rate: float
    lowpass_len: int = DEFAULT_LOWPASS_LEN
    window: str = "hamming"

    @property
    def stride_product(self) -> int:
        p = 1
        for stage in self.stages:
            if stage.stride is not None:
                p *= stage.stride
        return p

    def stage_rate(self, index: int) -> float:
        """Sampling rate of the frame axis at the input of stage `index`."""
        rate = self.input_rate
        for stage in self.stages[:index]:
            if stage.stride is not None:
                rate /= stage.stride
        return rate


def init_backbone(
    n_channels: int,
    input_rate: float,
    plan=DEFAULT_PLAN,
    lowpass_len: int = DEFAULT_LOWPASS_LEN,
    window: str = "hamming",
    rng: np.random.Generator | None = None,
) -> BackboneParams:
    """Build backbone parameters with fan-in-scaled uniform conv init.

    Per-channel low-pass cutoffs start at a quarter of the local Nyquist.
    """
    rng = rng or np.random.default_rng(0)
    stages = []
    c_in = n_channels
    rate = input_rate
    for stride, c_out in plan:
        cutoffs = None
        if stride is not None:
            cutoffs = np.full(c_in, 0.25 * rate / 2.0)
            rate /= stride
        bound = 1.0 / np.sqrt(c_in * 3)
        stages.append(
            BackboneStage(
                stride=stride,
                cutoffs=cutoffs,
                weight=rng.uniform(-bound, bound, size=(c_out, c_in, 3)),
                bias=np.zeros(c_out),
            )
        )
        c_in = c_out
    bound = 1.0 / np.sqrt(c_in)
    return BackboneParams(
        stages=stages,
        out_weight=rng.uniform(-bound, bound, size=c_in),
        out_bias=np.zeros(()),
        input_rate=input_rate,
        lowpass_len=lowpass_len,
        window=window,
    )


def lowpass_kernel(cutoff_hz: float, length: int, rate: float, window: str) -> np.ndarray:
    return materialize_kernel(
        SincBandPass(f_low=0.0, f_high=cutoff_hz, kernel_len=length, sample_rate=rate),
        window=window,
    )


def channel_lowpass_op(
    tape: GradTape | None,
    h: Var,
    cutoffs: Var,
    stride: int,
    rate: float,
    length: int,
    window: str,
) -> Var:
    """Per-channel low-pass then keep every stride-th frame. h is [B, C, T]."""
    b, c, t = h.data.shape
    if t % stride != 0:
        raise ValueError(f"frame count {t} not divisible by stride {stride}")
    kernels = np.stack(
        [lowpass_kernel(float(f), length, rate, window) for f in cutoffs.data]
    )
    out = np.empty((b, c, t // stride))
    for ci in range(c):
        out[:, ci, :] = _conv_rows(h.data[:, ci, :], kernels[ci])[:, ::stride]
    h_data = h.data

    def vjp(g):
        g_up = np.zeros((b, c, t))
        g_up[:, :, ::stride] = g
        gh = np.empty_like(h_data) if h.requires_grad else None
        gf = np.zeros(c) if cutoffs.requires_grad else None
        for ci in range(c):
            if gh is not None:
                gh[:, ci, :] = _conv_rows(g_up[:, ci, :], kernels[ci][::-1])
            if gf is not None:
                dk = _conv_rows_grad_kernel(h_data[:, ci, :], g_up[:, ci, :], length)
                _, d_high = kernel_cutoff_gradients(
                    SincBandPass(0.0, float(cutoffs.data[ci]), length, rate), window=window
                )
                gf[ci] = np.sum(dk * d_high)
        return (gh, gf)

    return record(tape, out, (h, cutoffs), vjp)


def cross_channel_op(tape: GradTape | None, h: Var, weight: Var, bias: Var) -> Var:
    """Width-3 cross-channel convolution with zero time padding. h is [B, C, T]."""
    b, c, t = h.data.shape
    padded = np.pad(h.data, ((0, 0), (0, 0), (1, 1)))
    w = weight.data
    out = np.zeros((b, w.shape[0], t))
    for u in range(3):
        out += np.tensordot(w[:, :, u], padded[:, :, u : u + t], axes=([1], [1])).transpose(
            1, 0, 2
        )
    out += bias.data[None, :, None]

    def vjp(g):
        gw = np.zeros_like(w) if weight.requires_grad else None
        gh = None
        if h.requires_grad:
            g_padded = np.zeros_like(padded)
            for u in range(3):
                g_padded[:, :, u : u + t] += np.tensordot(
                    w[:, :, u], g, axes=([0], [1])
                ).transpose(1, 0, 2)
            gh = g_padded[:, :, 1 : t + 1]
        if gw is not None:
            for u in range(3):
                gw[:, :, u] = np.tensordot(g, padded[:, :, u : u + t], axes=([0, 2], [0, 2]))
        gb = g.sum(axis=(0, 2)) if bias.requires_grad else None
        return (gh, gw, gb)

    return record(tape, out, (h, weight, bias), vjp)


def affine_time_op(tape: GradTape | None, h: Var, weight: Var, bias: Var) -> Var:
    """Per-frame affine map [B, C, T] -> [B, T]."""
    out = np.tensordot(weight.data, h.data, axes=([0], [1])) + bias.data
    h_data, w_data = h.data, weight.data

    def vjp(g):
        gw = np.einsum("bt,bct->c", g, h_data) if weight.requires_grad else None
        gh = w_data[None, :, None] * g[:, None, :] if h.requires_grad else None
        gb = np.sum(g) if bias.requires_grad else None
        return (gh, gw, gb)

    return record(tape, out, (h, weight, bias), vjp)


def _stage_vars(params: BackboneParams, pvars) -> list[dict[str, Var]]:
    if pvars is not None:
        return pvars
    built = []
    for stage in params.stages:
        built.append(
            {
                "cutoffs": Var(stage.cutoffs) if stage.cutoffs is not None else None,
                "weight": Var(stage.weight),
                "bias": Var(stage.bias),
            }
        )
    built.append({"weight": Var(params.out_weight), "bias": Var(params.out_bias)})
    return built


def run_backbone(
    tape: GradTape | None, h: Var, params: BackboneParams, pvars=None
) -> Var:
    """Map a [B, C, T] Var to nonnegative frame scores [B, T_out].

    `pvars` optionally supplies trainable Vars: one dict per stage with keys
    cutoffs/weight/bias, plus a final dict with the output weight/bias.
    """
    svars = _stage_vars(params, pvars)
    for idx, stage in enumerate(params.stages):
        sv = svars[idx]
        if stage.stride is not None:
            h = channel_lowpass_op(
                tape, h, sv["cutoffs"], stage.stride, params.stage_rate(idx),
                params.lowpass_len, params.window,
            )
        h = relu(tape, cross_channel_op(tape, h, sv["weight"], sv["bias"]))
    out = affine_time_op(tape, h, svars[-1]["weight"], svars[-1]["bias"])
    return softplus(tape, out)


def backbone_forward(tf: TFMap, params: BackboneParams) -> np.ndarray:
    """Inference path: frame scores for a single time-frequency map."""
    out = run_backbone(None, Var(tf.values[None, :, :]), params)
    return out.data[0]
