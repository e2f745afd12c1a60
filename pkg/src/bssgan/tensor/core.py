"""Tensor, tape and reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient. ``backward`` walks the tape once in
reverse, accumulating gradients additively at fan-out points.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from bssgan.errors import ConfigError, UsageError

LOG_CLAMP = 1e-12

_ids = itertools.count()
_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextmanager
def check_mode():
    """Create new tensors in float64 (used by gradient checks)."""
    previous = default_dtype()
    _local.dtype = np.dtype(np.float64)
    try:
        yield
    finally:
        _local.dtype = previous


class Tensor:
    """An n-d float array with an identity on the tape."""

    __slots__ = ("data", "name", "requires_grad", "id")
    __array_priority__ = 100

    def __init__(self, data, name: str | None = None, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.name = name
        self.requires_grad = requires_grad
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ConfigError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name, dtype=self.data.dtype)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, dtype={self.dtype})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar; every operator goes through the recorded ops below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, np.ndarray) and x.dtype.kind == "f":
        dtype = x.dtype
    return Tensor(x, dtype=dtype)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of one forward traversal.

    Use as a context manager; ops executed inside append nodes here.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_tape():
    """Suspend recording (inference paths)."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def record(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn) -> Tensor:
    result = Tensor(out, dtype=out.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.nodes.append(Node(op, tuple(inputs), result, backward_fn))
    return result


def backward(
    tape: Tape,
    loss: Tensor,
    wrt: Mapping[str, Tensor] | Iterable[Tensor] | None = None,
) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for the tensors in ``wrt``.

    ``wrt`` maps names to leaf tensors (or is an iterable of named tensors).
    When omitted, every named leaf that fed the tape is used. Tensors that do
    not influence the loss receive zero gradients.
    """
    if tape.consumed:
        raise UsageError("backward() already ran over this tape; record a fresh forward pass")
    if loss.size != 1:
        raise ConfigError(f"loss must be a scalar, got shape {loss.shape}")
    tape.consumed = True

    if wrt is None:
        produced = {n.output.id for n in tape.nodes}
        targets: dict[str, Tensor] = {}
        for node in tape.nodes:
            for t in node.inputs:
                if t.name and t.requires_grad and t.id not in produced:
                    targets.setdefault(t.name, t)
    elif isinstance(wrt, Mapping):
        targets = dict(wrt)
    else:
        targets = {t.name: t for t in wrt}

    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output.id, None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.id in grads:
                grads[t.id] = grads[t.id] + gi
            else:
                grads[t.id] = gi

    out = {}
    for name, t in targets.items():
        g = grads.get(t.id)
        out[name] = np.zeros_like(t.data) if g is None else g.reshape(t.shape).astype(t.dtype, copy=False)
    return out


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary_inputs(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    return record(
        "add", (a, b), a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    return record(
        "sub", (a, b), a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    return record(
        "mul", (a, b), a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    out = a.data / b.data
    return record(
        "div", (a, b), out,
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def power(x: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)

    def grad(g):
        if exponent == 0.0:
            return (np.zeros_like(x.data),)
        return (g * exponent * np.power(x.data, exponent - 1.0),)

    return record("pow", (x,), np.power(x.data, exponent), grad)


def log(x: Tensor, floor: float = LOG_CLAMP) -> Tensor:
    """ln(max(x, floor)); the gradient is zero where the floor binds."""
    clamped = np.maximum(x.data, floor)

    def grad(g):
        return (np.where(x.data > floor, g / clamped, 0.0).astype(x.dtype),)

    return record("log", (x,), np.log(clamped), grad)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record("exp", (x,), out, lambda g: (g * out,))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", (x,), np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), grad)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return record("mean", (x,), np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), grad)


def reshape(x: Tensor, shape) -> Tensor:
    return record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def index(x: Tensor, key) -> Tensor:
    if isinstance(key, Tensor):
        key = key.data
    out = x.data[key]

    def grad(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return record("index", (x,), np.array(out, copy=True), grad)


def pick(x: Tensor, labels) -> Tensor:
    """Row-wise gather ``x[i, labels[i]]`` for a 2-d tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    return index(x, (np.arange(x.shape[0]), labels))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis), grad)
