"""Dense float tensors and a reverse-mode gradient tape.

A ``Tensor`` wraps a numpy array (float32 by default; float64 is supported so
tests can recompute losses in higher precision). Operations executed while a
``GradTape`` is active append one node each; ``backward`` replays the nodes in
reverse execution order, visiting each exactly once, and returns gradients for
every leaf tensor with ``requires_grad``.

Tensors are treated as immutable once produced by an op. Parameters are leaf
tensors whose ``data`` is updated in place by the optimizer between steps; a
tape must never span such an update.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import DimensionError, NumericalError, UsageError

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """N-dimensional array of 32-bit (or 64-bit) reals."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)

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
            raise UsageError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Scalar/elementwise arithmetic used when composing losses. No broadcasting:
    # operands are either same-shape tensors or a tensor and a python number.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -float(other))

    def __rsub__(self, other):
        return add(-self, float(other))

    def __truediv__(self, other):
        return mul(self, 1.0 / float(other))


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


class TapeNode:
    """One executed op: inputs, output, and the adjoint function.

    ``backward_fn(grad_out) -> tuple of gradients`` aligned with ``inputs``;
    entries may be None when the corresponding input needs no gradient.
    """

    __slots__ = ("name", "inputs", "output", "backward_fn", "needs")

    def __init__(self, name: str, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable, needs: tuple):
        self.name = name
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn
        self.needs = needs


class GradTape:
    """Ordered record of executed ops, replayable to accumulate adjoints."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "GradTape exited out of order"

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)
        self._produced.add(id(node.output))

    def produced(self, tensor: Tensor) -> bool:
        return id(tensor) in self._produced


_TAPE_STACK: list[GradTape] = []


def active_tape() -> GradTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def needs_grad(t: Tensor) -> bool:
    """True when a gradient must flow into ``t`` (leaf parameter or on-tape)."""
    if t.requires_grad:
        return True
    tape = active_tape()
    return tape is not None and tape.produced(t)


def record_op(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
              backward_fn: Callable) -> Tensor:
    """Wrap an op result, guard against non-finite values, record on the tape."""
    if not np.all(np.isfinite(out_data)):
        raise NumericalError(f"non-finite values produced by '{name}'")
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    tape = active_tape()
    if tape is not None:
        needs = tuple(needs_grad(t) for t in inputs)
        if any(needs):
            tape.record(TapeNode(name, inputs, out, backward_fn, needs))
    return out


def backward(tape: GradTape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate adjoints of ``loss`` through ``tape``.

    Returns a mapping from each reached leaf tensor with ``requires_grad`` to
    its gradient array (same shape and dtype as the tensor data).
    """
    if loss.data.size != 1:
        raise UsageError(f"backward expects a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    keep: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        keep.pop(id(node.output), None)
        if g_out is None:
            continue  # this output never fed the loss
        in_grads = node.backward_fn(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None:
                continue
            g = np.asarray(g, dtype=t.data.dtype)
            tid = id(t)
            if tid in grads:
                grads[tid] = grads[tid] + g
            else:
                grads[tid] = g
                keep[tid] = t
    return {t: grads[tid] for tid, t in keep.items() if t.requires_grad}


# ---------------------------------------------------------------------------
# Elementwise / scalar building blocks


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Tensor):
        _same_shape(a, b, "add")
        out = a.data + b.data
        return record_op("add", (a, b), out, lambda g: (g, g))
    c = float(b)
    return record_op("add_const", (a,), a.data + np.asarray(c, dtype=a.dtype),
                     lambda g: (g,))


def mul(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Tensor):
        _same_shape(a, b, "mul")
        out = a.data * b.data

        def bw(g, ad=a.data, bd=b.data):
            return (g * bd, g * ad)

        return record_op("mul", (a, b), out, bw)
    c = float(b)
    return record_op("mul_const", (a,), a.data * np.asarray(c, dtype=a.dtype),
                     lambda g, c=c: (g * c,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericalError("log of non-positive value")
    out = np.log(a.data)

    def bw(g, ad=a.data):
        return (g / ad,)

    return record_op("log", (a,), out, bw)


def total_sum(a: Tensor) -> Tensor:
    """Sum of all elements, as a float64 scalar tensor."""
    a = as_tensor(a)
    out = np.asarray(np.sum(a.data, dtype=np.float64))

    def bw(g, shape=a.shape, dtype=a.dtype):
        return (np.full(shape, float(g), dtype=dtype),)

    return record_op("sum", (a,), out, bw)


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")
    return arr


def iter_unique(tensors: Iterable[Tensor]):
    seen = set()
    for t in tensors:
        if id(t) not in seen:
            seen.add(id(t))
            yield t
