"""Analytic gradients vs central finite differences for every primitive op.

Double-precision tensors with offsets keeping values away from relu/maxpool
decision boundaries, so the 1e-6 relative tolerance is meaningful.
"""

import numpy as np
import pytest

from posecascade.engine import (
    Tape,
    Tensor,
    backward,
    check_gradients,
    concat_channels,
    conv2d,
    maxpool2,
    mul,
    numeric_gradient,
    relu,
    sum_all,
)

RTOL64 = 1e-6


def run_gradcheck(build_loss, tensors, rtol=RTOL64):
    """backward() the loss, then compare each grad against finite differences."""
    with Tape() as tape:
        loss = build_loss()
        backward(loss, tape)
    analytic = [t.grad.copy() for t in tensors]
    worst = check_gradients(lambda: build_loss().item(), tensors, analytic, rtol=rtol)
    assert worst <= 1.0, f"worst scaled gradient error {worst:.3f} > 1"


def test_conv2d_gradients():
    rng = np.random.default_rng(42)
    x = Tensor(rng.normal(size=(2, 2, 6, 6)), requires_grad=True, dtype=np.float64)
    k = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.5, requires_grad=True, dtype=np.float64)
    b = Tensor(rng.normal(size=3) * 0.1, requires_grad=True, dtype=np.float64)
    run_gradcheck(lambda: sum_all(mul(conv2d(x, k, b, stride=2, padding=1),
                                      conv2d(x, k, b, stride=2, padding=1))),
                  [x, k, b])


def test_maxpool_gradients():
    rng = np.random.default_rng(43)
    # well-separated values keep the argmax stable under the FD perturbation
    data = rng.permutation(64).reshape(1, 1, 8, 8) * 0.37
    x = Tensor(data, requires_grad=True, dtype=np.float64)

    def loss():
        out, _ = maxpool2(x)
        return sum_all(mul(out, out))

    run_gradcheck(loss, [x])


def test_relu_gradients_away_from_kink():
    rng = np.random.default_rng(44)
    data = rng.normal(size=(4, 4))
    data[np.abs(data) < 0.05] += 0.2  # keep clear of the kink at 0
    x = Tensor(data, requires_grad=True, dtype=np.float64)
    run_gradcheck(lambda: sum_all(mul(relu(x), relu(x))), [x])


def test_concat_and_elementwise_gradients():
    rng = np.random.default_rng(45)
    a = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.normal(size=(1, 3, 4, 4)), requires_grad=True, dtype=np.float64)

    def loss():
        cat = concat_channels(a, b)
        return sum_all(mul(cat, cat))

    run_gradcheck(loss, [a, b])


def test_composed_network_gradients():
    rng = np.random.default_rng(46)
    x = Tensor(rng.normal(size=(1, 1, 8, 8)), requires_grad=True, dtype=np.float64)
    k1 = Tensor(rng.normal(size=(3, 1, 3, 3)) * 0.5, requires_grad=True, dtype=np.float64)
    b1 = Tensor(rng.normal(size=3) * 0.1 + 0.2, requires_grad=True, dtype=np.float64)
    k2 = Tensor(rng.normal(size=(2, 3, 3, 3)) * 0.4, requires_grad=True, dtype=np.float64)
    b2 = Tensor(rng.normal(size=2) * 0.1 + 0.2, requires_grad=True, dtype=np.float64)

    def loss():
        h = relu(conv2d(x, k1, b1, padding=1))
        h, _ = maxpool2(h)
        h = conv2d(h, k2, b2, padding=1)
        return sum_all(mul(h, h))

    run_gradcheck(loss, [x, k1, b1, k2, b2])


def test_single_precision_tolerance():
    rng = np.random.default_rng(47)
    x = Tensor(rng.normal(size=(1, 1, 6, 6)).astype(np.float32), requires_grad=True)
    k = Tensor((rng.normal(size=(2, 1, 3, 3)) * 0.5).astype(np.float32), requires_grad=True)
    b = Tensor(np.full(2, 0.1, dtype=np.float32), requires_grad=True)

    def build():
        return sum_all(mul(conv2d(x, k, b, padding=1), conv2d(x, k, b, padding=1)))

    with Tape() as tape:
        loss = build()
        backward(loss, tape)
    analytic = [t.grad.copy() for t in (x, k, b)]
    worst = check_gradients(lambda: build().item(), [x, k, b], analytic, rtol=1e-4)
    assert worst <= 1.0


def test_numeric_gradient_sanity():
    # d/dx of sum(x^2) is 2x; the FD oracle alone must recover that.
    x = Tensor(np.array([1.0, -2.0, 3.0]), dtype=np.float64)
    grad = numeric_gradient(lambda: float((x.data ** 2).sum()), x)
    np.testing.assert_allclose(grad, 2.0 * x.data, rtol=1e-8)
