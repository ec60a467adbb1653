"""Dense tensors with reverse-mode automatic differentiation on a gradient tape.

A :class:`Tensor` wraps a row-major numpy buffer plus an optional gradient of
the same shape.  Primitive operations (see :mod:`posecascade.engine.ops`)
record themselves onto the innermost active :class:`Tape`; replaying the tape
in reverse propagates gradients to every tensor that requires them.  Without
an active tape, operations run in plain inference mode and record nothing.

A tape and the tensors recorded on it form a single-threaded unit of work.
Tensors may be handed to another thread once detached from their tape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class Tensor:
    """N-dimensional float array, optionally carrying a gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = np.ascontiguousarray(arr, dtype=dtype)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = np.ascontiguousarray(arr, dtype=DEFAULT_DTYPE)
        else:
            arr = np.ascontiguousarray(arr)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Copy of this tensor with no gradient and no tape history."""
        return Tensor(self.data.copy(), requires_grad=False)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic sugar delegates to the primitive ops so everything is taped.
    def __add__(self, other: "Tensor") -> "Tensor":
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        from . import ops

        return ops.mul(self, other)

    def __neg__(self) -> "Tensor":
        from . import ops

        return ops.neg(self)

    def relu(self) -> "Tensor":
        from . import ops

        return ops.relu(self)

    def sum(self) -> "Tensor":
        from . import ops

        return ops.sum_all(self)


@dataclass
class TapeEntry:
    """One recorded primitive: output, its inputs, and the local backward."""

    output: Tensor
    inputs: tuple
    backward_fn: Callable[[np.ndarray], tuple]


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive operations, in execution (topological) order."""

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def record(self, output: Tensor, inputs: Sequence[Tensor],
               backward_fn: Callable[[np.ndarray], tuple]) -> None:
        self.entries.append(TapeEntry(output, tuple(inputs), backward_fn))

    def __len__(self) -> int:
        return len(self.entries)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every tensor upstream of ``loss``.

    Visits each recorded operation exactly once, in reverse execution order.
    Gradients accumulate across multiple uses of the same tensor.  The loss's
    own gradient is seeded to exactly 1.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for entry in reversed(tape.entries):
        g = entry.output.grad
        if g is None:
            continue
        input_grads = entry.backward_fn(g)
        for t, gi in zip(entry.inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            t.accumulate_grad(gi)


@dataclass
class Parameter:
    """Named trainable tensor; members of one share_group alias one storage."""

    name: str
    tensor: Tensor
    share_group: Optional[str] = None

    def __post_init__(self):
        if not self.tensor.requires_grad:
            raise ValueError(f"parameter '{self.name}' must require gradients")

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad
