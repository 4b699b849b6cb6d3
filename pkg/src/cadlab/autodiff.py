"""Reverse-mode differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array and, when any of its inputs requires a
gradient, records the closure needed to push gradients back to those inputs.
:func:`grad_scalar` differentiates a scalar objective with respect to every
array of a :class:`ParameterStore`; :func:`finite_diff` is the central
difference oracle used to check it.
"""
from __future__ import annotations

import contextlib
import contextvars
import hashlib
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np
from scipy.special import expit

from .errors import NumericError

DTYPE = np.float64

_scope: contextvars.ContextVar[str] = contextvars.ContextVar("cadlab_scope", default="<objective>")


@contextlib.contextmanager
def layer_scope(name: str) -> Iterator[None]:
    """Tag the ops created inside the block with a layer name for error messages."""
    token = _scope.set(name)
    try:
        yield
    finally:
        _scope.reset(token)


def _check_finite(value: np.ndarray, where: str, phase: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite value in {phase} pass at layer '{where}'", layer=where)


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_scope")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._scope = _scope.get()
        _check_finite(self.data, self._scope, "forward")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    live = tuple(p for p in parents if p.requires_grad)
    if not live:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, weight, bias) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _make(out, (x, weight, bias), backward)


def silu(a: Tensor) -> Tensor:
    sig = expit(a.data)
    out = a.data * sig

    def backward(g):
        return (g * (sig * (1.0 + a.data * (1.0 - sig))),)

    return _make(out, (a,), backward)


def take_rows(table, index: np.ndarray) -> Tensor:
    """Row gather ``table[index]``; the backward pass scatter-adds."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(table.data[index], (table,), backward)


def row_sq_norm(a: Tensor) -> Tensor:
    """Squared euclidean norm of each row."""
    return _make((a.data**2).sum(axis=1), (a,), lambda g: (2.0 * a.data * g[:, None],))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(a.data.mean(), (a,), lambda g: (np.full(a.shape, g / n),))


def total(a: Tensor) -> Tensor:
    return _make(a.data.sum(), (a,), lambda g: (np.full(a.shape, g),))


def stop_gradient(a: Tensor) -> Tensor:
    """Same value, no gradient flows through it."""
    return Tensor(as_tensor(a).data)


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(root)/d(node) for every node reachable from ``root``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            _check_finite(pg, node._scope, "backward")
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return grads


@dataclass(frozen=True, order=True)
class ComponentId:
    """Address of a single scalar parameter.

    ``kind`` is ``"weight"``, ``"bias"`` or ``"embedding"``. Bias entries use
    ``col == 0``.
    """

    layer: str
    kind: str
    row: int
    col: int = 0

    @property
    def key(self) -> tuple[str, str]:
        return (self.layer, self.kind)


class ParameterStore:
    """Ordered collection of named parameter arrays keyed by ``(layer, kind)``.

    Values are numpy arrays, or :class:`Tensor` leaves while an objective is
    being differentiated. The key order is part of the checkpoint format.
    """

    def __init__(self, arrays):
        self._arrays = dict(arrays)

    def __getitem__(self, key):
        return self._arrays[key]

    def __contains__(self, key) -> bool:
        return key in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def keys(self):
        return self._arrays.keys()

    def items(self):
        return self._arrays.items()

    def values(self):
        return self._arrays.values()

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: np.array(v, dtype=DTYPE, copy=True) for k, v in self._arrays.items()})

    def replace(self, key, value) -> "ParameterStore":
        arrays = dict(self._arrays)
        arrays[key] = value
        return ParameterStore(arrays)

    @property
    def size(self) -> int:
        return int(sum(np.asarray(v).size for v in self._arrays.values()))

    def shapes(self) -> dict:
        return {k: tuple(np.shape(v)) for k, v in self._arrays.items()}

    def _index(self, cid: ComponentId) -> tuple[int, ...]:
        if cid.key not in self._arrays:
            raise IndexError(f"unknown parameter array {cid.layer}.{cid.kind}")
        shape = np.shape(self._arrays[cid.key])
        if len(shape) == 1:
            if cid.col != 0 or not 0 <= cid.row < shape[0]:
                raise IndexError(f"{cid} outside shape {shape}")
            return (cid.row,)
        if not (0 <= cid.row < shape[0] and 0 <= cid.col < shape[1]):
            raise IndexError(f"{cid} outside shape {shape}")
        return (cid.row, cid.col)

    def get(self, cid: ComponentId) -> float:
        idx = self._index(cid)
        return float(self._arrays[cid.key][idx])

    def with_value(self, cid: ComponentId, value: float) -> "ParameterStore":
        """Copy-on-write update of one scalar; other arrays are shared."""
        idx = self._index(cid)
        arr = np.array(self._arrays[cid.key], dtype=DTYPE, copy=True)
        arr[idx] = value
        return self.replace(cid.key, arr)

    def component_ids(self, key) -> list[ComponentId]:
        shape = np.shape(self._arrays[key])
        if len(shape) == 1:
            return [ComponentId(key[0], key[1], i, 0) for i in range(shape[0])]
        return [ComponentId(key[0], key[1], r, c) for r in range(shape[0]) for c in range(shape[1])]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for (layer, kind), arr in self._arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            h.update(f"{layer}.{kind}{arr.shape}".encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def allclose(self, other: "ParameterStore", **kw) -> bool:
        return list(self.keys()) == list(other.keys()) and all(
            np.allclose(self[k], other[k], **kw) for k in self.keys()
        )

    def array_equal(self, other: "ParameterStore") -> bool:
        return list(self.keys()) == list(other.keys()) and all(
            np.array_equal(self[k], other[k]) for k in self.keys()
        )


# Gradients live in a ParameterStore with congruent shapes.
GradientStore = ParameterStore

Objective = Callable[[ParameterStore], "Tensor | float"]


def evaluate(objective: Objective, params: ParameterStore) -> float:
    """Evaluate an objective without recording a tape."""
    consts = ParameterStore({k: Tensor(v) for k, v in params.items()})
    return float(as_tensor(objective(consts)).data)


def grad_scalar(objective: Objective, params: ParameterStore) -> tuple[float, GradientStore]:
    """Value and exact gradient of a scalar objective w.r.t. every parameter."""
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    out = as_tensor(objective(ParameterStore(leaves)))
    if out.data.size != 1:
        raise ValueError(f"objective must be scalar, got shape {out.shape}")
    value = float(out.data)
    grads = backward(out) if out.requires_grad else {}
    store = {}
    for key, leaf in leaves.items():
        g = grads.get(id(leaf))
        store[key] = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=DTYPE).reshape(leaf.shape)
    return value, ParameterStore(store)


def finite_diff(objective: Objective, params: ParameterStore, cid: ComponentId, h: float = 1e-5) -> float:
    """Central difference of the objective along one component."""
    if not h > 0:
        raise ValueError("step size must be positive")
    w = params.get(cid)
    plus = evaluate(objective, params.with_value(cid, w + h))
    minus = evaluate(objective, params.with_value(cid, w - h))
    return (plus - minus) / (2.0 * h)
