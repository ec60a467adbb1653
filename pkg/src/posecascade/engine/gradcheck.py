"""Central finite-difference gradient checking.

The numeric side never touches the tape: it re-runs the given forward
function on perturbed copies of the data buffer, so it is an independent
oracle for the analytic gradients produced by ``backward``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def default_eps(dtype) -> float:
    return 1e-6 if np.dtype(dtype) == np.float64 else 3e-3


def default_rtol(dtype) -> float:
    return 1e-6 if np.dtype(dtype) == np.float64 else 1e-4


def numeric_gradient(f: Callable[[], float], x: Tensor, eps: float = None) -> np.ndarray:
    """Central differences of ``f`` with respect to every element of ``x``.

    ``f`` must recompute the forward value from the current contents of
    ``x.data``; this function perturbs the buffer in place and restores it.
    """
    if eps is None:
        eps = default_eps(x.data.dtype)
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f()
        flat[i] = orig - eps
        f_minus = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def max_scaled_error(analytic: np.ndarray, numeric: np.ndarray,
                     rtol: float, atol: float = None) -> float:
    """Max of |a - n| / (atol + rtol * |n|); a value <= 1 means the check passes.

    ``atol`` defaults to ``rtol`` scaled by the largest numeric-gradient
    magnitude (floored at 1), which keeps near-zero entries from dominating.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if atol is None:
        atol = rtol * max(1.0, float(np.abs(numeric).max(initial=0.0)))
    denom = atol + rtol * np.abs(numeric)
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))


def check_gradients(f: Callable[[], float], wrt: Sequence[Tensor],
                    analytic: Sequence[np.ndarray],
                    eps: float = None, rtol: float = None) -> float:
    """Compare analytic grads against central differences; return worst scaled error."""
    worst = 0.0
    for x, a in zip(wrt, analytic):
        if rtol is None:
            rtol = default_rtol(x.data.dtype)
        n = numeric_gradient(f, x, eps=eps)
        worst = max(worst, max_scaled_error(a, n, rtol))
    return worst
