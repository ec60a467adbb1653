"""A walk through the tensor engine: tapes, primitives, gradient checking.

Run:  python demos/01_autograd_engine.py
"""

import numpy as np

from posecascade.engine import (
    Tape,
    Tensor,
    backward,
    conv2d,
    maxpool2,
    mul,
    numeric_gradient,
    relu,
    sum_all,
)

rng = np.random.default_rng(0)

# Tensors wrap numpy buffers; ops record onto the innermost active tape.
x = Tensor(rng.normal(size=(1, 1, 6, 6)), requires_grad=True, dtype=np.float64)
k = Tensor(rng.normal(size=(2, 1, 3, 3)) * 0.5, requires_grad=True, dtype=np.float64)
b = Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)

with Tape() as tape:
    h = relu(conv2d(x, k, b, stride=1, padding=1))
    pooled, argmax = maxpool2(h)
    loss = sum_all(mul(pooled, pooled))
    backward(loss, tape)

print(f"loss = {loss.item():.6f}")
print(f"tape recorded {len(tape)} primitive ops")
print(f"grad shapes: x {x.grad.shape}, kernel {k.grad.shape}, bias {b.grad.shape}")

# The analytic gradients agree with central finite differences, the
# independent oracle used throughout the test suite.
def forward_value() -> float:
    h2 = relu(conv2d(x, k, b, stride=1, padding=1))
    p2, _ = maxpool2(h2)
    return sum_all(mul(p2, p2)).item()

fd = numeric_gradient(forward_value, k)
rel = np.abs(fd - k.grad).max() / max(1.0, np.abs(fd).max())
print(f"max |analytic - finite difference| (relative): {rel:.2e}")

# Max pooling routes gradient to the argmax only; ties break row-major.
flat = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True, dtype=np.float64)
with Tape() as tape:
    out, idx = maxpool2(flat)
    backward(sum_all(out), tape)
print(f"tie-broken pool winner index: {idx[0, 0, 0, 0]} (first in row-major order)")
print(f"pool gradient:\n{flat.grad[0, 0]}")
