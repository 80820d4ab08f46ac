"""Central finite-difference gradient checking for float32 functions.

The perturbed points are rounded to float32 before evaluation and the
actually-applied step (in float64) is used as the divisor, which keeps the
estimate accurate even though the function itself runs in float32.
"""
from __future__ import annotations

from typing import Callable

import numpy as np


def numeric_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray,
                     step: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array.

    Per-element step is ``step * max(1, |x_i|)``.
    """
    x = np.asarray(x, dtype=np.float32)
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        h = step * max(1.0, abs(float(flat[i])))
        xp = flat.copy()
        xm = flat.copy()
        xp[i] = np.float32(float(flat[i]) + h)
        xm[i] = np.float32(float(flat[i]) - h)
        denom = float(xp[i]) - float(xm[i])
        fp = fn(xp.reshape(x.shape))
        fm = fn(xm.reshape(x.shape))
        gflat[i] = (fp - fm) / denom
    return g


def max_grad_error(analytic: np.ndarray, numeric: np.ndarray,
                   rtol: float, atol: float) -> float:
    """Largest violation of |a - n| <= atol + rtol * |n| across elements.

    Returns the worst ratio (|a - n| / (atol + rtol * |n|)); values <= 1
    mean the check passes.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {n.shape}")
    tol = atol + rtol * np.abs(n)
    return float(np.max(np.abs(a - n) / tol))


def assert_gradients_close(analytic: np.ndarray, numeric: np.ndarray,
                           rtol: float = 1e-3, atol: float = 1e-4,
                           label: str = "") -> None:
    worst = max_grad_error(analytic, numeric, rtol, atol)
    if worst > 1.0:
        raise AssertionError(
            f"gradient check failed{' for ' + label if label else ''}: "
            f"worst violation ratio {worst:.3g} (rtol={rtol}, atol={atol})")
