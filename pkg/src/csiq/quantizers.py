"""Quantizer zoo for compressed-codeword feedback.

Three families: plain uniform quantization over a fixed range, mu-law
companding quantization, and a learnable per-element quantizer (forward
weights ``w`` mapping codewords to integer indices, inverse weights ``v``
mapping them back) whose training-time surrogate is a sum-of-sigmoids
soft rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gradflow import soft_round_values


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (not banker's)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def uniform_quantize(s, s_min: float, s_max: float, bits: int) -> np.ndarray:
    """Uniform quantization onto a zero-anchored grid of step (max-min)/(2^bits - 1).

    Inputs are clipped into [s_min, s_max] before rounding and outputs are
    clipped back into the range, so both 0 (a grid point) and the range
    endpoints are exactly representable.
    """
    if bits < 1:
        raise ValueError(f"bits must be >= 1, got {bits}")
    if not s_min < s_max:
        raise ValueError(f"need s_min < s_max, got [{s_min}, {s_max}]")
    step = (s_max - s_min) / (2 ** bits - 1)
    clipped = np.clip(np.asarray(s, dtype=np.float64), s_min, s_max)
    return np.clip(step * round_half_away(clipped / step), s_min, s_max)


def uniform_indices(s, s_min: float, s_max: float, bits: int) -> np.ndarray:
    """Integer grid indices backing :func:`uniform_quantize` (for bitstreams)."""
    if bits < 1:
        raise ValueError(f"bits must be >= 1, got {bits}")
    step = (s_max - s_min) / (2 ** bits - 1)
    clipped = np.clip(np.asarray(s, dtype=np.float64), s_min, s_max)
    return round_half_away(clipped / step).astype(np.int64)


def uniform_from_indices(k, s_min: float, s_max: float, bits: int) -> np.ndarray:
    step = (s_max - s_min) / (2 ** bits - 1)
    return np.clip(np.asarray(k, dtype=np.float64) * step, s_min, s_max)


def mu_compand(x, mu: float = 255.0) -> np.ndarray:
    """Logarithmic companding of values in [-1, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.abs(x) > 1.0 + 1e-12):
        raise ValueError("mu_compand input must lie in [-1, 1]")
    return np.sign(x) * np.log1p(mu * np.abs(x)) / np.log1p(mu)


def mu_expand(y, mu: float = 255.0) -> np.ndarray:
    """Exact inverse of :func:`mu_compand`."""
    y = np.asarray(y, dtype=np.float64)
    return np.sign(y) * (np.expm1(np.abs(y) * np.log1p(mu))) / mu


def mu_law_quantize(s, scale: float, bits: int, mu: float = 255.0) -> np.ndarray:
    """Compand, uniformly quantize in the companded domain, expand back.

    ``scale`` maps the codeword range onto [-1, 1]; out-of-range values are
    clipped.
    """
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    x = np.clip(np.asarray(s, dtype=np.float64) / scale, -1.0, 1.0)
    y = uniform_quantize(mu_compand(x, mu), -1.0, 1.0, bits)
    return scale * mu_expand(y, mu)


def mu_law_indices(s, scale: float, bits: int, mu: float = 255.0) -> np.ndarray:
    """Companded-domain grid indices; range [-2^(bits-1), 2^(bits-1)] inclusive."""
    x = np.clip(np.asarray(s, dtype=np.float64) / scale, -1.0, 1.0)
    return uniform_indices(mu_compand(x, mu), -1.0, 1.0, bits)


def mu_law_from_indices(k, scale: float, bits: int, mu: float = 255.0) -> np.ndarray:
    y = uniform_from_indices(k, -1.0, 1.0, bits)
    return scale * mu_expand(y, mu)


def soft_round(x, bits: int, sharpness: float) -> np.ndarray:
    """Differentiable stand-in for rounding onto the signed index range.

    Sum of sigmoids, one per boundary between adjacent levels in
    [-2^(bits-1), 2^(bits-1)]; monotone in ``x`` and saturating at the
    range ends.  Operates on plain arrays; the autodiff op in
    :mod:`csiq.gradflow` shares this exact forward formula.
    """
    if sharpness <= 0:
        raise ValueError(f"sharpness must be positive, got {sharpness}")
    half = 1 << (bits - 1)
    return soft_round_values(x, -half, half, sharpness)


@dataclass
class QuantizerParams:
    """Per-element forward/inverse weights plus bit width and sigmoid sharpness."""

    w: np.ndarray
    v: np.ndarray
    bits: int
    sharpness: float = 200.0

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.w.ndim != 1 or self.w.shape != self.v.shape:
            raise ValueError(f"w and v must be 1-d with equal length, got {self.w.shape} / {self.v.shape}")
        if np.any(self.w <= 0):
            raise ValueError("forward weights must be strictly positive")
        if self.bits < 1:
            raise ValueError(f"bits must be >= 1, got {self.bits}")
        if self.sharpness <= 0:
            raise ValueError(f"sharpness must be positive, got {self.sharpness}")

    @property
    def size(self) -> int:
        return self.w.shape[0]

    def index_range(self) -> tuple[int, int]:
        half = 1 << (self.bits - 1)
        return -half, half - 1


def learned_forward(s, params: QuantizerParams, mode: str = "infer") -> np.ndarray:
    """Map codewords through the forward weights to indices (or soft values).

    ``infer`` returns clipped integer indices; ``train`` returns the soft
    rounded real values (no clipping: the soft round saturates on its own).
    """
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != params.size:
        raise ValueError(f"codeword length {s.shape[-1]} != quantizer size {params.size}")
    z = s * params.w
    if mode == "train":
        return soft_round(z, params.bits, params.sharpness)
    if mode == "infer":
        lo, hi = params.index_range()
        return np.clip(round_half_away(z), lo, hi).astype(np.int64)
    raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")


def learned_inverse(k, params: QuantizerParams) -> np.ndarray:
    """Reconstruct approximate codewords from indices: s_hat = k * v."""
    k = np.asarray(k)
    if k.shape[-1] != params.size:
        raise ValueError(f"index length {k.shape[-1]} != quantizer size {params.size}")
    lo, hi = params.index_range()
    if np.issubdtype(k.dtype, np.integer) and (k.min(initial=0) < lo or k.max(initial=0) > hi):
        raise ValueError(f"index outside [{lo}, {hi}]")
    return k.astype(np.float64) * params.v


def quantizer_regularizer(w, kind: str = "l1") -> float:
    """Weight-vector penalty for the joint training loss (default L1)."""
    w = np.asarray(w, dtype=np.float64)
    if kind == "l1":
        return float(np.abs(w).sum())
    if kind == "l2":
        return float(np.sqrt((w * w).sum()))
    raise ValueError(f"kind must be 'l1' or 'l2', got {kind!r}")


def truncate_index(k, bits: int, bits_new: int) -> np.ndarray:
    """Drop low-order index bits (floor division, sign-preserving)."""
    if not 1 <= bits_new < bits:
        raise ValueError(f"need 1 <= bits_new < bits, got {bits_new} / {bits}")
    factor = 1 << (bits - bits_new)
    return np.floor_divide(np.asarray(k, dtype=np.int64), factor)


def truncated_inverse(k_new, params: QuantizerParams, bits_new: int) -> np.ndarray:
    """Reconstruct truncated indices at the centroid of the merged cells.

    A coarse cell covers original indices [k'*f, k'*f + f - 1], so the
    inverse uses the scaled weight v*f plus a (f-1)/2 half-cell offset.
    """
    if not 1 <= bits_new < params.bits:
        raise ValueError(f"need 1 <= bits_new < bits, got {bits_new} / {params.bits}")
    factor = 1 << (params.bits - bits_new)
    centers = np.asarray(k_new, dtype=np.float64) * factor + (factor - 1) / 2.0
    return centers * params.v
