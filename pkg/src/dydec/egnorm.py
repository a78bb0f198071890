"""Learnable energy-gain normalization.

Each filter node owns one parameter set (sigma, alpha, delta, gamma). The
input waveform is rectified and smoothed with a normalized Gaussian to get a
positive loudness envelope W, then compressed as

    out = signed_pow(x / W**alpha + delta, gamma) - delta**gamma

where signed_pow(b, g) = sign(b) * |b|**g keeps negative waveform excursions
real-valued. The transform maps zero signals to zero for any valid parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Floor added to the smoothed envelope so divisions stay finite.
ENVELOPE_EPS = 1e-6
# Positivity floor applied to sigma/delta/gamma after optimizer steps.
PARAM_FLOOR = 1e-3
# Gaussian support radius is ceil(4*sigma) taps, capped to bound cost.
MAX_RADIUS = 64
# The normalized ratio x / W**alpha is clamped to this magnitude.
RATIO_CLAMP = 1e6


@dataclass
class EgNormParams:
    """Trainable parameters of one energy-gain normalization block."""

    sigma: float = 0.5
    alpha: float = 0.96
    delta: float = 2.0
    gamma: float = 0.5

    def validate(self) -> None:
        if not (self.sigma > 0 and self.delta > 0 and self.gamma > 0):
            raise ValueError(f"sigma/delta/gamma must be positive, got {self}")

    def clamped(self) -> "EgNormParams":
        """Return a copy with sigma/delta/gamma floored at the positivity bound."""
        return EgNormParams(
            sigma=max(self.sigma, PARAM_FLOOR),
            alpha=self.alpha,
            delta=max(self.delta, PARAM_FLOOR),
            gamma=max(self.gamma, PARAM_FLOOR),
        )


def gaussian_radius(sigma: float) -> int:
    return int(min(np.ceil(4.0 * sigma), MAX_RADIUS))


def gaussian_taps(sigma: float) -> np.ndarray:
    """Unit-mass Gaussian taps over offsets -R..R for std `sigma` (in samples)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = gaussian_radius(sigma)
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    phi = np.exp(-0.5 * (t / sigma) ** 2)
    return phi / phi.sum()


def _reflect_pad(rows: np.ndarray, radius: int) -> np.ndarray:
    # Mirror without repeating the edge sample; needs radius <= length-1.
    n = rows.shape[-1]
    if radius > n - 1:
        raise ValueError(f"signal of length {n} too short for smoothing radius {radius}")
    if radius == 0:
        return rows
    left = rows[..., 1 : radius + 1][..., ::-1]
    right = rows[..., n - radius - 1 : n - 1][..., ::-1]
    return np.concatenate([left, rows, right], axis=-1)


def _correlate_rows_valid(rows: np.ndarray, taps: np.ndarray) -> np.ndarray:
    if rows.ndim == 1:
        return np.correlate(rows, taps, mode="valid")
    return np.stack([np.correlate(r, taps, mode="valid") for r in rows])


def _smooth_forward(signal: np.ndarray, sigma: float):
    """Shared smoothing forward: returns (envelope, taps, padded |signal|)."""
    taps = gaussian_taps(sigma)
    radius = len(taps) // 2
    padded = _reflect_pad(np.abs(signal), radius)
    return _correlate_rows_valid(padded, taps) + ENVELOPE_EPS, taps, padded


def gaussian_smooth(signal: np.ndarray, sigma: float) -> np.ndarray:
    """Smooth the rectified signal with a unit-mass Gaussian.

    Works on a single vector or on a batch of rows (last axis is time).
    Boundaries are reflected, so a constant input stays constant. The output
    is strictly positive: ENVELOPE_EPS is added everywhere.
    """
    out, _, _ = _smooth_forward(np.asarray(signal, dtype=np.float64), sigma)
    return out


def gaussian_smooth_vjp(
    signal: np.ndarray, sigma: float, grad_out: np.ndarray, smooth_ctx=None
) -> tuple[np.ndarray, float]:
    """Backprop through gaussian_smooth.

    Returns (d/d signal, d/d sigma). The truncation radius is held fixed while
    differentiating; the discarded tail mass is negligible at 4 sigma.
    """
    signal = np.asarray(signal, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    squeeze = signal.ndim == 1
    x = signal[None, :] if squeeze else signal
    g_out = grad_out[None, :] if squeeze else grad_out

    if smooth_ctx is None:
        taps = gaussian_taps(sigma)
        padded = _reflect_pad(np.abs(x), len(taps) // 2)
    else:
        taps, padded = smooth_ctx
        if squeeze:
            padded = padded[None, :] if padded.ndim == 1 else padded
    radius = len(taps) // 2

    # Adjoint of the valid correlation is a full convolution with the taps.
    n = x.shape[-1]
    d_padded = np.stack([np.convolve(row, taps, mode="full") for row in g_out])
    d_u = d_padded[:, radius : radius + n].copy()
    if radius > 0:
        d_u[:, 1 : radius + 1] += d_padded[:, :radius][:, ::-1]
        d_u[:, n - radius - 1 : n - 1] += d_padded[:, radius + n :][:, ::-1]
    d_signal = d_u * np.sign(x)

    # d taps / d sigma, with the normalization differentiated as well.
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    phi = np.exp(-0.5 * (t / sigma) ** 2)
    dphi = phi * (t**2) / sigma**3
    s = phi.sum()
    dtaps = dphi / s - taps * (dphi.sum() / s)
    # Per-tap sensitivity sum_n grad_out[n] * padded[n + j].
    tap_sens = np.zeros(2 * radius + 1)
    for row_p, row_g in zip(padded, g_out):
        tap_sens += np.correlate(row_p, row_g, mode="valid")
    d_sigma = float(dtaps @ tap_sens)

    if squeeze:
        d_signal = d_signal[0]
    return d_signal, d_sigma


def _signed_pow(base: np.ndarray, gamma: float) -> np.ndarray:
    return np.sign(base) * np.abs(base) ** gamma


def eg_normalize(signal: np.ndarray, params: EgNormParams) -> np.ndarray:
    """Apply energy-gain normalization to a vector or batch of rows."""
    params.validate()
    out, _ = _eg_forward(np.asarray(signal, dtype=np.float64), params)
    return out


def _eg_forward(x: np.ndarray, params: EgNormParams):
    w, taps, padded = _smooth_forward(x, params.sigma)
    w_alpha = w**params.alpha
    ratio = np.clip(x / w_alpha, -RATIO_CLAMP, RATIO_CLAMP)
    base = ratio + params.delta
    signed = _signed_pow(base, params.gamma)
    out = signed - params.delta**params.gamma
    ctx = (w, w_alpha, ratio, base, signed, taps, padded)
    return out, ctx


def eg_normalize_vjp(
    signal: np.ndarray, params: EgNormParams, grad_out: np.ndarray, ctx=None
) -> tuple[np.ndarray, dict[str, float]]:
    """Backprop through eg_normalize.

    Returns (d/d signal, {"sigma": ..., "alpha": ..., "delta": ..., "gamma": ...}).
    Pass the ctx from _eg_forward to skip recomputing the forward pass.
    """
    params.validate()
    x = np.asarray(signal, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64)
    if ctx is None:
        _, ctx = _eg_forward(x, params)
    w, w_alpha, ratio, base, signed, taps, padded = ctx
    gamma, delta, alpha = params.gamma, params.delta, params.alpha

    # |base|**(gamma-1) == signed_pow(base, gamma) / base; guard base near 0.
    abs_base = np.maximum(np.abs(base), 1e-12)
    base_safe = np.where(base >= 0.0, abs_base, -abs_base)
    d_base = g * gamma * (signed / base_safe)

    d_gamma = float(
        np.sum(g * signed * np.log(abs_base)) - np.sum(g) * delta**gamma * np.log(delta)
    )
    d_delta = float(np.sum(d_base) - np.sum(g) * gamma * delta ** (gamma - 1.0))

    unclamped = np.abs(ratio) < RATIO_CLAMP
    d_ratio = d_base * unclamped
    d_x_direct = d_ratio / w_alpha
    d_w_alpha = -d_ratio * ratio / w_alpha
    log_w = np.log(w)
    d_alpha = float(np.sum(d_w_alpha * w_alpha * log_w))
    d_w = d_w_alpha * alpha * (w_alpha / w)

    d_x_smooth, d_sigma = gaussian_smooth_vjp(x, params.sigma, d_w, smooth_ctx=(taps, padded))
    d_signal = d_x_direct + d_x_smooth
    return d_signal, {"sigma": d_sigma, "alpha": d_alpha, "delta": d_delta, "gamma": d_gamma}
