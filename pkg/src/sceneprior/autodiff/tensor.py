"""Tensor type and the recording tape behind reverse-mode differentiation.

Every differentiable operation produces a :class:`Tensor` and, when any of
its inputs requires a gradient, appends one record to the active
:class:`Tape`. :func:`backward` walks that tape in exact reverse order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        desc = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class Tensor:
    """A float64 array with an optional gradient slot.

    Leaf tensors created with ``requires_grad=True`` accumulate gradients in
    ``grad``. Intermediate results carry their adjoint only transiently while
    :func:`backward` runs.
    """

    __slots__ = ("value", "grad", "requires_grad", "name", "_adj", "_leaf", "__weakref__")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.array(value, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.value) if self.requires_grad else None
        self.name = name
        self._adj = None
        self._leaf = True

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.value.copy())

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.value.shape[0]

    # operator sugar; implementations live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, p):
        from . import ops
        return ops.power(self, p)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __rmatmul__(self, other):
        from . import ops
        return ops.matmul(other, self)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)


ParamTensor = Tensor


def param(value, name: str | None = None) -> Tensor:
    """Trainable leaf tensor."""
    return Tensor(value, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Record:
    __slots__ = ("out", "inputs", "vjp", "op")

    def __init__(self, op: str, out: Tensor, inputs: Sequence[Tensor], vjp: Callable):
        self.op = op
        self.out = out
        self.inputs = tuple(inputs)
        self.vjp = vjp


class Tape:
    """Ordered log of primitive applications."""

    def __init__(self):
        self.records: list[Record] = []

    def __len__(self):
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()

    def ops(self) -> list[str]:
        return [r.op for r in self.records]


_tapes: list[Tape] = [Tape()]
_grad_enabled = [True]


def current_tape() -> Tape:
    return _tapes[-1]


@contextlib.contextmanager
def new_tape():
    """Record operations onto a fresh tape for the duration of the block."""
    tape = Tape()
    _tapes.append(tape)
    try:
        yield tape
    finally:
        _tapes.pop()


@contextlib.contextmanager
def no_grad():
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


def grad_enabled() -> bool:
    return _grad_enabled[-1]


def record(op: str, value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``value`` and log the operation if any input needs a gradient.

    ``vjp(g)`` must return one array (or None) per input, each already
    shaped like that input.
    """
    out = Tensor.__new__(Tensor)
    out.value = value if value.dtype == DTYPE else value.astype(DTYPE)
    out.grad = None
    out.name = None
    out._adj = None
    out._leaf = False
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        current_tape().records.append(Record(op, out, inputs, vjp))
    return out


def backward(loss: Tensor, tape: Tape | None = None, retain: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    The tape is consumed (cleared) unless ``retain`` is set.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = tape if tape is not None else current_tape()
    if loss._leaf:
        loss.grad += 1.0
        return
    loss._adj = np.ones_like(loss.value)
    for rec in reversed(tape.records):
        g = rec.out._adj
        if g is None:
            continue
        rec.out._adj = None
        grads = rec.vjp(g)
        for inp, gi in zip(rec.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._leaf:
                inp.grad += gi
            elif inp._adj is None:
                inp._adj = np.array(gi, dtype=DTYPE, copy=True)
            else:
                inp._adj += gi
    if not retain:
        tape.clear()
