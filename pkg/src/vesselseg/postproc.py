"""Otsu threshold selection on probability maps and binarization.

The 256-bin histogram covers [0, 1] with bin k spanning [k/256, (k+1)/256)
(last bin closed). The split point maximizing between-class variance is found
with exact integer arithmetic, so ties are broken toward the lower bin without
any floating-point ambiguity: comparing omega0*omega1*(mu0-mu1)^2 across splits
reduces to comparing (s0*n1 - s1*n0)^2 / (n0*n1) with integer moments.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import UsageError

BINS = 256


class OtsuResult(NamedTuple):
    threshold: float
    degenerate: bool


def histogram256(prob_map: np.ndarray) -> np.ndarray:
    """Counts of probability values over the 256 equal bins of [0, 1]."""
    arr = np.asarray(prob_map)
    if arr.size == 0:
        raise UsageError("histogram of an empty probability map")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise UsageError("probability map values must lie in [0, 1]")
    idx = np.minimum((arr.astype(np.float64) * BINS).astype(np.int64), BINS - 1)
    return np.bincount(idx.ravel(), minlength=BINS)


def otsu_threshold(prob_map: np.ndarray) -> OtsuResult:
    """Threshold (k*+1)/256 maximizing between-class variance.

    Returns (0.5, degenerate=True) when every pixel falls into a single bin.
    """
    hist = histogram256(prob_map)
    counts = [int(v) for v in hist]
    total_n = sum(counts)
    total_s = sum(k * c for k, c in enumerate(counts))
    best_k = -1
    best_a2 = 0  # A^2 where A = s0*n1 - s1*n0
    best_b = 1   # B = n0*n1; compare A1^2*B2 vs A2^2*B1 exactly
    n0 = 0
    s0 = 0
    for k in range(BINS - 1):
        n0 += counts[k]
        s0 += k * counts[k]
        n1 = total_n - n0
        if n0 == 0 or n1 == 0:
            continue
        s1 = total_s - s0
        a = s0 * n1 - s1 * n0
        a2 = a * a
        b = n0 * n1
        if best_k < 0 or a2 * best_b > best_a2 * b:
            best_k, best_a2, best_b = k, a2, b
    if best_k < 0:
        return OtsuResult(0.5, True)
    return OtsuResult((best_k + 1) / BINS, False)


def binarize(prob_map: np.ndarray, threshold: float) -> np.ndarray:
    """uint8 mask: 1 where value >= threshold, else 0."""
    if not (0.0 <= threshold <= 1.0):
        raise UsageError(f"threshold must lie in [0, 1], got {threshold}")
    return (np.asarray(prob_map) >= threshold).astype(np.uint8)
