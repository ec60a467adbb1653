"""Stochastic gradient descent over named parameters."""

from __future__ import annotations

from typing import Dict, Optional, Sequence

import numpy as np

from .tensor import Parameter


def sgd_step(params: Sequence[Parameter], learning_rate: float, *,
             momentum: float = 0.0,
             velocities: Optional[Dict[int, np.ndarray]] = None) -> None:
    """Apply ``p <- p - lr * grad(p)`` to every distinct parameter storage.

    Parameters sharing a storage (one share_group) are updated exactly once.
    All gradients of the given parameters are cleared afterwards.  A missing
    gradient is an error.  Plain SGD by default; pass ``momentum`` > 0 and a
    ``velocities`` dict (keyed by storage id) for the momentum variant.
    """
    if learning_rate < 0:
        raise ValueError(f"learning_rate must be non-negative, got {learning_rate}")
    if momentum and velocities is None:
        raise ValueError("momentum requires a velocities dict to persist state")

    unique = {}
    for p in params:
        if p.tensor.grad is None:
            raise ValueError(f"parameter '{p.name}' has no gradient; run backward first")
        unique.setdefault(id(p.tensor), p.tensor)

    for key, t in unique.items():
        step = t.grad
        if momentum:
            v = velocities.get(key)
            if v is None:
                v = np.zeros_like(t.data)
            v = momentum * v + step
            velocities[key] = v
            step = v
        t.data -= np.asarray(learning_rate, dtype=t.data.dtype) * step
        t.grad = None
