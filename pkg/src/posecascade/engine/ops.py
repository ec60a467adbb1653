"""Primitive differentiable operations.

Every op validates shapes up front, computes its forward value with numpy,
and, when a tape is active and an input requires gradients, records a closure
that turns the output gradient into per-input gradients.

Conventions fixed here:
  * conv2d uses cross-correlation semantics (no kernel flip) with symmetric
    zero padding.
  * maxpool2 is a fixed 2x2 / stride-2 pool; on ties the first element of the
    window in row-major order receives the whole gradient.
  * relu's subgradient at exactly 0 is 0.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import ShapeError, Tensor, active_tape


def _finish(out: Tensor, inputs: tuple, backward_fn) -> Tensor:
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, inputs, backward_fn)
    return out


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    return _finish(out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _finish(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    return _finish(out, (a, b), lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _finish(out, (a,), lambda g: (-g,))


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = Tensor(a.data.sum(dtype=a.data.dtype))
    shape = a.data.shape
    return _finish(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    mask = a.data > 0
    return _finish(out, (a,), lambda g: (g * mask,))


def _conv_cols(x_padded: np.ndarray, kh: int, kw: int, stride: int,
               out_h: int, out_w: int) -> np.ndarray:
    """im2col: (B,C,Hp,Wp) -> (C*kh*kw, B*out_h*out_w), one contiguous copy."""
    b, c = x_padded.shape[:2]
    windows = np.lib.stride_tricks.sliding_window_view(x_padded, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (B, C, out_h, out_w, kh, kw)
    cols = windows.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, b * out_h * out_w)
    return np.ascontiguousarray(cols)


def conv2d(input: Tensor, kernel: Tensor, bias: Tensor,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over (N,C,H,W) with (F,C,kH,kW) filters.

    Output spatial size is floor((H + 2*padding - kH)/stride) + 1 (same for W).
    Differentiable with respect to input, kernel and bias.
    """
    if input.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be (N,C,H,W), got shape {input.data.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be (F,C,kH,kW), got shape {kernel.data.shape}")
    if bias.data.ndim != 1:
        raise ShapeError(f"conv2d: bias must be 1-D, got shape {bias.data.shape}")
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ShapeError(f"conv2d: stride must be a positive int, got {stride!r}")
    if not isinstance(padding, (int, np.integer)) or padding < 0:
        raise ShapeError(f"conv2d: padding must be a non-negative int, got {padding!r}")

    b, c, h, w = input.data.shape
    f, ck, kh, kw = kernel.data.shape
    if ck != c:
        raise ShapeError(f"conv2d: kernel expects {ck} input channels, input has {c}")
    if bias.data.shape[0] != f:
        raise ShapeError(f"conv2d: bias has {bias.data.shape[0]} entries for {f} filters")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )
    out_h = (hp - kh) // stride + 1
    out_w = (wp - kw) // stride + 1

    if padding > 0:
        x_padded = np.pad(input.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        x_padded = input.data
    cols = _conv_cols(x_padded, kh, kw, stride, out_h, out_w)
    w_mat = kernel.data.reshape(f, c * kh * kw)
    out_flat = w_mat @ cols  # (F, B*out_h*out_w)
    out = out_flat.reshape(f, b, out_h, out_w).transpose(1, 0, 2, 3)
    out = out + bias.data[None, :, None, None]
    out_t = Tensor(np.ascontiguousarray(out))

    x_data = input.data  # captured for backward; cols are rebuilt on demand

    def backward_fn(g: np.ndarray):
        go = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, b * out_h * out_w)
        grad_bias = go.sum(axis=1)
        if padding > 0:
            xp = np.pad(x_data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        else:
            xp = x_data
        cols_b = _conv_cols(xp, kh, kw, stride, out_h, out_w)
        grad_w = (go @ cols_b.T).reshape(f, c, kh, kw)
        grad_cols = (w_mat.T @ go).reshape(c, kh, kw, b, out_h, out_w)
        grad_xp = np.zeros((b, c, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                grad_xp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += \
                    grad_cols[:, i, j].transpose(1, 0, 2, 3)
        if padding > 0:
            grad_x = grad_xp[:, :, padding:padding + h, padding:padding + w]
        else:
            grad_x = grad_xp
        return grad_x, grad_w, grad_bias

    return _finish(out_t, (input, kernel, bias), backward_fn)


def maxpool2(input: Tensor):
    """2x2 stride-2 max pool.  Returns (pooled tensor, argmax indices).

    The indices array has shape (N,C,H/2,W/2) with values in {0,1,2,3}
    indexing the window in row-major order; backward routes the gradient to
    exactly that element.
    """
    if input.data.ndim != 4:
        raise ShapeError(f"maxpool2: input must be (N,C,H,W), got shape {input.data.shape}")
    b, c, h, w = input.data.shape
    if h % 2 != 0 or w % 2 != 0:
        raise ShapeError(f"maxpool2: spatial size {h}x{w} must be even")
    oh, ow = h // 2, w // 2
    windows = input.data.reshape(b, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(b, c, oh, ow, 4)
    idx = windows.argmax(axis=-1)  # first max in row-major window order
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    out_t = Tensor(np.ascontiguousarray(out))

    def backward_fn(g: np.ndarray):
        grad_windows = np.zeros((b, c, oh, ow, 4), dtype=g.dtype)
        np.put_along_axis(grad_windows, idx[..., None], g[..., None], axis=-1)
        grad_x = grad_windows.reshape(b, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (np.ascontiguousarray(grad_x.reshape(b, c, h, w)),)

    return _finish(out_t, (input,), backward_fn), idx


def concat_channels(*tensors: Tensor) -> Tensor:
    """Stack (N,C_i,H,W) tensors along the channel axis, in argument order."""
    if not tensors:
        raise ShapeError("concat_channels: need at least one tensor")
    first = tensors[0].data
    if first.ndim != 4:
        raise ShapeError(f"concat_channels: tensors must be (N,C,H,W), got {first.shape}")
    n, _, h, w = first.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != 4 or s[0] != n or s[2] != h or s[3] != w:
            raise ShapeError(
                f"concat_channels: shape {s} incompatible with {first.shape} "
                "(batch and spatial dimensions must match)"
            )
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1))
    offsets = np.cumsum([0] + [t.data.shape[1] for t in tensors])

    def backward_fn(g: np.ndarray):
        return tuple(
            np.ascontiguousarray(g[:, offsets[i]:offsets[i + 1]])
            for i in range(len(tensors))
        )

    return _finish(out, tensors, backward_fn)
