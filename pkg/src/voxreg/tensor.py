"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends a node to the active :class:`Tape`
when at least one of its inputs requires a gradient.  Nodes are recorded in
execution order, so the tape is topologically sorted by construction and
:meth:`Tape.backward` only needs a single reverse sweep.

Feature maps use the layout ``(channels, x, y, z)``.  No broadcasting is
performed: binary ops require identical shapes, scalars go through
:func:`scale`.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "ShapeError",
    "get_tape",
    "recording",
    "no_grad",
    "apply_op",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "leaky_relu",
    "square",
    "tsum",
    "mean",
    "concat",
    "tslice",
]


class TapeError(RuntimeError):
    """Raised on invalid use of the differentiation tape."""


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A numpy array that can take part in reverse-mode differentiation.

    Parameters
    ----------
    data : array_like
        Values.  Floating arrays keep their dtype, everything else is
        converted to float32.
    requires_grad : bool
        Whether gradients should be accumulated into ``.grad`` for this
        tensor when it is a leaf of a recorded computation.
    name : str, optional
        Label used in diagnostics.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else _shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else _shift(self, -other)

    def __rsub__(self, other):
        return _shift(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return tslice(self, index)


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    index: int = -1


@dataclass
class Tape:
    """Append-only record of the operations executed since the last sweep."""

    nodes: list[_Node] = field(default_factory=list)
    enabled: bool = True

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: _Node) -> None:
        node.index = len(self.nodes)
        self.nodes.append(node)
        node.output._node = node

    def clear(self) -> None:
        for node in self.nodes:
            node.output._node = None
        self.nodes = []

    def backward(self, loss: Tensor) -> None:
        """Propagate ``d loss / d leaf`` into ``.grad`` of every leaf that requires it.

        The tape is cleared afterwards, so a second call on the same loss
        raises :class:`TapeError`.
        """
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        node = loss._node
        if node is None or node.index >= len(self.nodes) or self.nodes[node.index] is not node:
            raise TapeError("loss is not recorded on this tape (was backward already called?)")

        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes[: node.index + 1]):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise ShapeError(
                        f"{node.op}: gradient shape {gi.shape} does not match input {inp.shape}"
                    )
                if inp._node is not None:
                    prev = pending.get(id(inp))
                    pending[id(inp)] = gi if prev is None else prev + gi
                else:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
        self.clear()


_tape_stack: list[Tape] = [Tape()]


def get_tape() -> Tape:
    """Return the tape new operations are recorded on."""
    return _tape_stack[-1]


@contextlib.contextmanager
def recording(tape: Tape | None = None) -> Iterator[Tape]:
    """Record operations on ``tape`` (a fresh one by default) inside the block."""
    tape = Tape() if tape is None else tape
    _tape_stack.append(tape)
    try:
        yield tape
    finally:
        _tape_stack.pop()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording, e.g. for inference."""
    with recording(Tape(enabled=False)):
        yield


def backward(loss: Tensor) -> None:
    get_tape().backward(loss)


def apply_op(
    op: str,
    inputs: Sequence[Tensor],
    out: np.ndarray,
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``out`` in a tensor and record it if any input needs a gradient.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    input, in the order of ``inputs``.
    """
    tape = get_tape()
    needs = tape.enabled and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        tape.record(_Node(op, tuple(inputs), result, backward_fn))
    return result


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return apply_op("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return apply_op("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return apply_op("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * a.data.dtype.type(c)
    return apply_op("scale", (a,), out, lambda g: (g * g.dtype.type(c),))


def _shift(a: Tensor, c: float) -> Tensor:
    out = a.data + a.data.dtype.type(c)
    return apply_op("shift", (a,), out, lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return apply_op("neg", (a,), -a.data, lambda g: (-g,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    x = a.data
    s = x.dtype.type(slope)
    pos = x > 0
    out = np.where(pos, x, x * s)
    return apply_op("leaky_relu", (a,), out, lambda g: (np.where(pos, g, g * s),))


def square(a: Tensor) -> Tensor:
    x = a.data
    return apply_op("square", (a,), x * x, lambda g: (2 * g * x,))


def tsum(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=dtype)
    return apply_op("sum", (a,), out, lambda g: (np.full(shape, g, dtype=dtype),))


def mean(a: Tensor) -> Tensor:
    shape, dtype, n = a.shape, a.dtype, a.size
    out = np.asarray(a.data.mean(dtype=np.float64), dtype=dtype)
    return apply_op("mean", (a,), out, lambda g: (np.full(shape, g / n, dtype=dtype),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts

    return apply_op("concat", tuple(tensors), out, bw)


def tslice(a: Tensor, index) -> Tensor:
    """Basic (slice / integer) indexing; the gradient is scattered back."""
    if not isinstance(index, tuple):
        index = (index,)
    for i in index:
        if not isinstance(i, (slice, int, np.integer)) and i is not Ellipsis:
            raise TypeError("only basic indexing is differentiable")
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return apply_op("slice", (a,), a.data[index].copy(), bw)
