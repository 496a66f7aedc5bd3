"""Stable elementary math shared across the package.

Everything here works in float64. Vector helpers accept an ``axis`` so the
same code serves single predictions and minibatches.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


def log_sum_exp(values, axis: int | None = None):
    """Return ``log(sum(exp(values)))`` using the max-shift trick.

    ``-inf`` entries are allowed (they contribute nothing), provided each
    reduction has at least one finite entry. NaN propagates to the result.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0 or (axis is not None and v.shape[axis] == 0):
        raise ValueError("empty reduction")
    m = np.max(v, axis=axis, keepdims=True)
    if np.any(np.isneginf(m)):
        raise ValueError("log_sum_exp needs at least one finite value per reduction")
    out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def gaussian_log_pdf(y, mu, sigma):
    """Log density of N(mu, sigma**2) at y. ``sigma`` is a standard deviation."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("non-positive scale")
    z = (np.asarray(y, dtype=np.float64) - mu) / sigma
    out = -0.5 * LOG_2PI - np.log(sigma) - 0.5 * z * z
    return float(out) if np.ndim(out) == 0 else out


def softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty reduction")
    e = np.exp(v - np.max(v, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    shifted = v - np.max(v, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def sigmoid(x):
    """Logistic function in the branch-stable form (never exponentiates a positive)."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def finite_diff_gradient(
    f: Callable[[np.ndarray], float], params, eps: float = 1e-6, indices=None
) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat parameter vector.

    Used as the independent oracle for every analytic gradient in the package.
    The difference ``f(p + e) - f(p - e)`` is taken in whatever precision ``f``
    returns (e.g. ``np.longdouble`` or an mpmath number), so a higher-precision
    ``f`` yields a more accurate oracle. ``indices`` restricts the coordinates
    evaluated; the others are reported as NaN.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    p = np.array(params, dtype=np.float64).ravel()
    coords = range(p.size) if indices is None else indices
    grad = np.full(p.size, np.nan)
    for k in coords:
        orig = p[k]
        p[k] = orig + eps
        hi = f(p.copy())
        p[k] = orig - eps
        lo = f(p.copy())
        p[k] = orig
        step = (orig + eps) - (orig - eps)  # the step actually taken in float64
        g = float((hi - lo) / step)
        if not math.isfinite(g):
            raise FloatingPointError(f"non-finite function value at coordinate {k}")
        grad[k] = g
    return grad


def max_relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
