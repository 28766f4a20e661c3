"""Weight quantization: min-max normalization, grid rounding, residual
bit decomposition, and the bit-sharing composition with inverted
threshold indicators.

A weight tensor is linearly mapped into [0, 1], rounded onto the
2^b-step grid, and mapped back. The residual decomposition keeps the
16-bit grid values plus the two residuals toward 8 and 4 bits; dropping
residuals recovers the coarser quantizations exactly because the
composition runs on the normalized grids (dyadic rationals, exact in
IEEE floats) and denormalizes once at the end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add_const

SEARCH_BITS = (4, 8, 16)

DEGENERATE_SCALE = 1e-12


def sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@dataclass
class NormParams:
    """Linear map w -> (w - offset)/scale onto [0, 1]."""
    offset: float
    scale: float
    degenerate: bool = False


@dataclass
class QuantThresholds:
    """Learned thresholds for dropping the 9-16 and 5-8 bit residuals."""
    t_q_9_16: float = 0.0
    t_q_5_8: float = 0.0


def norm_fit(w: np.ndarray) -> NormParams:
    w = np.asarray(w)
    if w.size == 0:
        raise ValueError("norm_fit: empty tensor")
    lo = float(w.min())
    hi = float(w.max())
    scale = hi - lo
    if scale < DEGENERATE_SCALE:
        return NormParams(offset=lo, scale=1.0, degenerate=True)
    return NormParams(offset=lo, scale=scale)


def normalize(w: np.ndarray, p: NormParams) -> np.ndarray:
    if p.degenerate:
        return np.zeros_like(w)
    return (w - np.asarray(p.offset, dtype=w.dtype)) / np.asarray(p.scale, dtype=w.dtype)


def denormalize(q: np.ndarray, p: NormParams, dtype=None) -> np.ndarray:
    dtype = dtype or q.dtype
    return (np.asarray(p.offset) + np.asarray(p.scale) * q).astype(dtype)


def q_round(x, b: int):
    """Round onto the 2^b grid: floor(x*2^b)/2^b + zeta/2^b.

    zeta is 1 only when the fractional part strictly exceeds 0.5, so a
    fraction of exactly 0.5 rounds down. Evaluated in float64 so the
    fraction comparison is sharp; the result is a dyadic rational that
    casts back to float32 exactly for b <= 16.
    """
    if b < 1:
        raise ValueError(f"q_round: bit count must be >= 1, got {b}")
    arr = np.asarray(x)
    scalar = arr.ndim == 0
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError("q_round: input outside [0, 1]")
    x64 = arr.astype(np.float64) * float(2 ** b)
    fl = np.floor(x64)
    zeta = (x64 - fl) > 0.5
    q = (fl + zeta) / float(2 ** b)
    out = q.astype(arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64)
    return out.item() if scalar else out


def quantize(w: np.ndarray, b: int, params: NormParams | None = None) -> np.ndarray:
    """w* = denorm(q_round(norm(w), b)); identity for degenerate scale."""
    w = np.asarray(w)
    p = params if params is not None else norm_fit(w)
    if p.degenerate:
        return w.copy()
    return denormalize(q_round(normalize(w, p), b), p, dtype=w.dtype)


@dataclass
class BitDecomposition:
    """16-bit grid plus residuals toward 8 and 4 bits for one group.

    q16/d_9_16/d_5_8 live in normalized space (exact dyadics);
    w16/r_9_16/r_5_8 are the denormalized views. Composition drops
    residuals in normalized space and denormalizes once, so hard drops
    land exactly on the coarser grids.
    """
    params: NormParams
    q16: np.ndarray
    d_9_16: np.ndarray
    d_5_8: np.ndarray
    dtype: np.dtype

    @property
    def w16(self) -> np.ndarray:
        return denormalize(self.q16, self.params, dtype=self.dtype)

    @property
    def r_9_16(self) -> np.ndarray:
        return (np.asarray(self.params.scale) * self.d_9_16).astype(self.dtype)

    @property
    def r_5_8(self) -> np.ndarray:
        return (np.asarray(self.params.scale) * self.d_5_8).astype(self.dtype)

    def norm_sq_9_16(self) -> float:
        r = self.r_9_16.astype(np.float64)
        return float(np.sum(r * r))

    def norm_sq_5_8(self) -> float:
        r = self.r_5_8.astype(np.float64)
        return float(np.sum(r * r))


def decompose(w: np.ndarray, params: NormParams | None = None) -> BitDecomposition:
    """Quantize at 16/8/4 bits with one shared NormParams and difference."""
    w = np.asarray(w)
    p = params if params is not None else norm_fit(w)
    if p.degenerate:
        z = np.zeros_like(w)
        return BitDecomposition(params=p, q16=z, d_9_16=z.copy(), d_5_8=z.copy(),
                                dtype=w.dtype)
    x = normalize(w, p)
    q16 = q_round(x, 16)
    q8 = q_round(x, 8)
    q4 = q_round(x, 4)
    return BitDecomposition(params=p, q16=q16, d_9_16=q16 - q8, d_5_8=q8 - q4,
                            dtype=w.dtype)


def drop_probabilities(d: BitDecomposition, t: QuantThresholds) -> tuple[float, float]:
    """Sigmoid drop probabilities; inverted indicator: threshold minus norm."""
    s_outer = sigmoid(t.t_q_9_16 - d.norm_sq_9_16())
    s_inner = sigmoid(t.t_q_5_8 - d.norm_sq_5_8())
    return s_outer, s_inner


def compose(d: BitDecomposition, m_outer: float, m_inner: float) -> np.ndarray:
    """w_q = denorm(q16 - m_outer*(d_9_16 + m_inner*d_5_8))."""
    if d.params.degenerate:
        return denormalize(d.q16, d.params, dtype=d.dtype)
    q = d.q16 - m_outer * (d.d_9_16 + m_inner * d.d_5_8)
    return denormalize(q, d.params, dtype=d.dtype)


def bit_share(d: BitDecomposition, t: QuantThresholds, mode: str,
              rng: np.random.Generator | None = None) -> np.ndarray:
    """Mask the residuals by the drop decisions.

    soft multiplies by the sigmoid values; sampled draws the outer drop
    and, only when it fires, the inner one; hard thresholds at 0.5.
    """
    s_outer, s_inner = drop_probabilities(d, t)
    if mode == "soft":
        m_outer, m_inner = s_outer, s_inner
    elif mode == "sampled":
        if rng is None:
            raise ValueError("bit_share: sampled mode needs an rng")
        m_outer = 1.0 if rng.random() < s_outer else 0.0
        m_inner = (1.0 if rng.random() < s_inner else 0.0) if m_outer else 0.0
    elif mode == "hard":
        m_outer = 1.0 if s_outer >= 0.5 else 0.0
        m_inner = 1.0 if s_inner >= 0.5 else 0.0
    else:
        raise ValueError(f"bit_share: unknown mode {mode!r}")
    return compose(d, m_outer, m_inner)


def effective_bits(t: QuantThresholds, d: BitDecomposition) -> int:
    """Hard decision to bit width: keep residuals -> 16; drop outer -> 8;
    drop both -> 4."""
    s_outer, s_inner = drop_probabilities(d, t)
    if s_outer < 0.5:
        return 16
    return 4 if s_inner >= 0.5 else 8


def bits_to_masks(bits: int) -> tuple[float, float]:
    if bits == 16:
        return 0.0, 0.0
    if bits == 8:
        return 1.0, 0.0
    if bits == 4:
        return 1.0, 1.0
    raise ValueError(f"unsupported bit width {bits}, expected one of {SEARCH_BITS}")


def quantize_ste(w: Tensor, bits: int, params: NormParams | None = None) -> Tensor:
    """Quantize a tensor's values at a fixed width, straight-through grads."""
    d = decompose(w.data, params)
    values = compose(d, *bits_to_masks(bits))
    return add_const(w, values - w.data)


def share_ste(w: Tensor, m_outer: float, m_inner: float) -> Tensor:
    """Bit-share a tensor with externally supplied masks (shared group
    policy), straight-through grads; residuals act as constants."""
    d = decompose(w.data)
    values = compose(d, m_outer, m_inner)
    return add_const(w, values - w.data)
