"""Reconstruction and quantization error metrics.

Both metrics normalize per sample and then average the ratios, so every
sample counts equally regardless of its channel energy.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

DB_FLOOR = -120.0


@dataclass(frozen=True)
class MetricResult:
    linear: float
    db: float
    n_used: int
    n_excluded: int


def to_db(linear: float) -> float:
    """10*log10 with a -120 dB floor for exact-zero errors."""
    if linear <= 0.0:
        return DB_FLOOR
    return max(10.0 * np.log10(linear), DB_FLOOR)


def _normalized_error(truth, estimate, label: str) -> MetricResult:
    truth = np.asarray(truth)
    estimate = np.asarray(estimate)
    if truth.shape != estimate.shape:
        raise ValueError(f"shape mismatch: {truth.shape} vs {estimate.shape}")
    if truth.ndim < 2:
        truth = truth[None]
        estimate = estimate[None]
    n = truth.shape[0]
    flat_t = truth.reshape(n, -1)
    flat_e = estimate.reshape(n, -1)
    norms = np.sum(np.abs(flat_t) ** 2, axis=1)
    errors = np.sum(np.abs(flat_t - flat_e) ** 2, axis=1)
    keep = norms > 0
    excluded = int(n - keep.sum())
    if excluded:
        warnings.warn(f"{label}: excluded {excluded} zero-norm sample(s)")
    if not keep.any():
        raise ValueError(f"{label}: no nonzero-norm samples to average")
    linear = float(np.mean(errors[keep] / norms[keep]))
    return MetricResult(linear, to_db(linear), int(keep.sum()), excluded)


def nmse(truth, estimate) -> MetricResult:
    """Mean over samples of ||H - H_hat||^2 / ||H||^2 (linear and dB)."""
    return _normalized_error(truth, estimate, "nmse")


def nmsqe(codewords, quantized) -> MetricResult:
    """Mean over samples of ||s - s_hat||^2 / ||s||^2 for codeword vectors."""
    return _normalized_error(codewords, quantized, "nmsqe")
