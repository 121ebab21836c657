"""Minimal tape-based reverse-mode differentiation over float64 numpy arrays.

Operations only record onto a tape while one is active::

    with Tape() as tape:
        loss = gc.sum(gc.relu(gc.matmul(x, w)))
        tape.backward(loss)

Outside a tape every op is a plain numpy computation, which is how inference runs.
Gradients accumulate into ``.grad`` of leaf tensors (those with ``requires_grad``
that were not produced by a recorded op).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


class GradientContractError(RuntimeError):
    pass


class Tensor:
    """Dense float64 array that may participate in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.ravel()

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def backward(self) -> None:
        tape = _state.tape
        if tape is None:
            raise GradientContractError("backward() needs an active Tape")
        tape.backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


@dataclass(eq=False)
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class _State(threading.local):
    tape: "Tape | None" = None


_state = _State()


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so reverse order is a valid
    topological order for the backward sweep.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._previous: Tape | None = None

    def __enter__(self) -> "Tape":
        self._previous = _state.tape
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._previous
        self._previous = None

    def clear(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes.clear()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        node = _Node(out, inputs, backward)
        out._node = node
        out.requires_grad = True
        self.nodes.append(node)

    def backward(self, root: Tensor, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if root.data.size != 1:
                raise ShapeError("backward() from a non-scalar needs an explicit seed")
            seed = np.ones_like(root.data)
        if root._node is None:
            if root.requires_grad:
                _accumulate(root, seed)
            return
        adjoints = {id(root): np.asarray(seed, dtype=np.float64)}
        for node in reversed(self.nodes):
            g = adjoints.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    _accumulate(inp, gi)
                elif id(inp) in adjoints:
                    adjoints[id(inp)] = adjoints[id(inp)] + gi
                else:
                    adjoints[id(inp)] = gi
        self.clear()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._node = None
    tape = _state.tape
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward)
    return out


def is_recording() -> bool:
    return _state.tape is not None


# ---------------------------------------------------------------------------
# elementwise


def _trailing_broadcast(a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or len(sb) == 0 or len(sa) == 0:
        return
    short, long_ = (sb, sa) if len(sb) <= len(sa) else (sa, sb)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"shapes {sa} and {sb} are not trailing-broadcastable")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.reshape(-1, *shape).sum(axis=0)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _trailing_broadcast(a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _trailing_broadcast(a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _trailing_broadcast(a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def minimum(a: Tensor, c: float) -> Tensor:
    """Elementwise ``min(a, c)`` against a constant; ties pass the gradient."""
    mask = a.data <= c
    return _make(np.where(mask, a.data, c), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape and reductions


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _make(a.data.T, (a,), lambda g: (g.T,))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), back)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def take(a: Tensor, rows, cols) -> Tensor:
    """Gather ``a[rows, cols]`` from a matrix."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def back(g):
        out = np.zeros(a.shape)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return _make(a.data[rows, cols], (a,), back)


def concat(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    sizes = np.cumsum([p.shape[0] for p in parts])[:-1]
    return _make(
        np.concatenate([p.data for p in parts], axis=0),
        parts,
        lambda g: tuple(np.split(g, sizes, axis=0)),
    )


def trace(a: Tensor) -> Tensor:
    n = a.shape[0]
    return _make(np.asarray(np.trace(a.data)), (a,), lambda g: (g * np.eye(n),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        ),
    )


def cholesky_inverse_logdet(s) -> tuple[np.ndarray, float]:
    """Inverse and log-determinant of a symmetric positive-definite matrix."""
    s = np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64)
    try:
        chol = np.linalg.cholesky(s)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"matrix is not positive definite: {exc}") from None
    diag = np.diag(chol)
    if np.any(diag <= 0) or not np.all(np.isfinite(diag)):
        raise NotPositiveDefiniteError("non-positive Cholesky pivot")
    eye = np.eye(len(s))
    l_inv = np.linalg.solve(chol, eye)
    inverse = l_inv.T @ l_inv
    return inverse, float(2.0 * np.log(diag).sum())


def spd_inverse(s: Tensor) -> Tensor:
    inverse, _ = cholesky_inverse_logdet(s)
    return _make(inverse, (s,), lambda g: (-inverse.T @ g @ inverse.T,))


def spd_logdet(s: Tensor) -> Tensor:
    inverse, logdet = cholesky_inverse_logdet(s)
    return _make(np.asarray(logdet), (s,), lambda g: (g * inverse.T,))


# ---------------------------------------------------------------------------
# network pieces


def max_over_points(x: Tensor) -> Tensor:
    """Column max of an ``N x D`` matrix, returned as a length-``D`` vector."""
    if x.shape[0] == 0:
        raise EmptyInputError("max over an empty point set")
    return reshape(segment_max(x, np.array([0, x.shape[0]])), (x.shape[1],))


def segment_max(x: Tensor, offsets) -> Tensor:
    """Per-segment column max over ragged row blocks of ``x``.

    Gradient flows only to the arg-max row of each column (lowest row on ties).
    """
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    if len(offsets) < 2 or np.any(np.diff(offsets) <= 0):
        raise EmptyInputError("max over an empty point set")
    out, rows = kernels.segment_max(np.ascontiguousarray(x.data), offsets)
    cols = np.broadcast_to(np.arange(x.shape[1]), rows.shape)

    def back(g):
        grad = np.zeros(x.shape)
        np.add.at(grad, (rows, cols), g)
        return (grad,)

    return _make(out, (x,), back)


def softmax_logits(z: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    if not np.all(np.isfinite(z.data)):
        raise DomainError("softmax of non-finite logits")
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (z,), back)


def log_softmax(z: Tensor) -> Tensor:
    if not np.all(np.isfinite(z.data)):
        raise DomainError("log-softmax of non-finite logits")
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def back(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _make(out, (z,), back)


def row_max(a: Tensor) -> Tensor:
    """Max over the last axis of a matrix; lowest column wins ties."""
    idx = np.argmax(a.data, axis=1)
    rows = np.arange(a.shape[0])
    return take(a, rows, idx)


# ---------------------------------------------------------------------------
# optimisation


def sgd_step(params: Iterable[Tensor], learning_rate: float) -> None:
    """In-place ``p <- p - lr * grad`` for every parameter, then clear gradients."""
    params = list(params)
    for p in params:
        if p.requires_grad and p.grad is None:
            raise GradientContractError("parameter has no gradient; run backward first")
    for p in params:
        if p.requires_grad:
            p.data -= learning_rate * p.grad
            p.grad = None
