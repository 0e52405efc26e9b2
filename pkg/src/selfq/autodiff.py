"""Reverse-mode automatic differentiation over float64 numpy arrays.

Operations executed while a :class:`Graph` is active are appended to its tape
whenever at least one input requires a gradient.  ``Graph.backward`` then walks
the tape in exact reverse order, once.  Outside of a graph every op is a plain
numpy computation, which is what sampling and finite-difference checks use.

Every normalization denominator is guarded with ``EPS = 1e-8``.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

EPS = 1e-8

_local = threading.local()


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __mul__(self, c: float) -> "Tensor":
        return scale(self, c)

    __rmul__ = __mul__

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class Graph:
    """Define-by-run tape.  Use as a context manager around the forward pass.

    Graphs are thread-local: each worker builds and consumes its own.
    """

    def __init__(self):
        self._tape: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Graph":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self._tape)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> None:
        if self._consumed:
            raise GraphError("graph already consumed by a backward pass")
        out.requires_grad = True
        self._tape.append((out, parents, backward))

    def backward(self, root: Tensor, seed: np.ndarray | float | None = None) -> None:
        if self._consumed:
            raise GraphError("a graph is consumed by exactly one backward pass")
        if not root.requires_grad:
            raise GraphError("root tensor does not depend on any trainable input")
        if seed is None:
            root.grad = np.ones_like(root.data)
        else:
            root.grad = np.broadcast_to(np.asarray(seed, dtype=np.float64), root.shape).copy()

        for out, parents, fn in reversed(self._tape):
            g = out.grad
            if g is None:
                continue
            grads = fn(g)
            for p, pg in zip(parents, grads):
                if pg is None or not p.requires_grad:
                    continue
                # grads are never mutated in place, so aliasing upstream arrays is safe
                p.grad = pg if p.grad is None else p.grad + pg
        for _, parents, _ in self._tape:
            for p in parents:
                if p.requires_grad and p.grad is None:
                    p.grad = np.zeros_like(p.data)
        self._consumed = True
        self._tape = []


def current_graph() -> Graph | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _result(arr: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor._wrap(arr)
    g = current_graph()
    if g is not None and any(p.requires_grad for p in parents):
        g.record(out, parents, backward)
    return out


def _check_2d(name: str, *ts: Tensor) -> None:
    for t in ts:
        if t.ndim != 2:
            raise ShapeError(f"{name} expects 2-D tensors, got shape {t.shape}")


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum.  ``b`` may also be a row vector broadcast over rows of ``a``."""
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim == 2 and a.shape[1] == b.shape[0]:
        return _result(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    _check_2d("transpose", a)
    return _result(a.data.T, (a,), lambda g: (g.T,))


def concat_rows(ts: Sequence[Tensor]) -> Tensor:
    ts = tuple(ts)
    if not ts:
        raise ShapeError("concat_rows needs at least one tensor")
    _check_2d("concat_rows", *ts)
    width = ts[0].shape[1]
    for t in ts:
        if t.shape[1] != width:
            raise ShapeError(f"concat_rows: column mismatch {ts[0].shape} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[0] for t in ts])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(ts)))

    return _result(np.concatenate([t.data for t in ts], axis=0), ts, backward)


def concat_cols(ts: Sequence[Tensor]) -> Tensor:
    ts = tuple(ts)
    _check_2d("concat_cols", *ts)
    bounds = np.cumsum([0] + [t.shape[1] for t in ts])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(ts)))

    return _result(np.concatenate([t.data for t in ts], axis=1), ts, backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    _check_2d("slice_cols", a)
    n = a.shape[1]

    def backward(g):
        full = np.zeros((a.shape[0], n))
        full[:, start:stop] = g
        return (full,)

    return _result(a.data[:, start:stop], (a,), backward)


def mean_rows(a: Tensor) -> Tensor:
    """Mean over the row axis, keeping a leading axis of 1."""
    _check_2d("mean_rows", a)
    m = a.shape[0]
    return _result(a.data.mean(axis=0, keepdims=True), (a,),
                   lambda g: (np.broadcast_to(g / m, a.shape).copy(),))


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _result(0.5 * xd * (1.0 + t), (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = EPS) -> Tensor:
    """Normalize over the last axis, then apply gain and bias."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gamma.shape}/{beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    gd = gamma.data

    def backward(g):
        dxhat = g * gd
        gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + beta.data, (x, gamma, beta), backward)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Rows ``table[ids]``; also serves as a differentiable row gather."""
    _check_2d("embedding_lookup", table)
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: id out of range for table {table.shape}")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result(table.data[idx], (table,), backward)


def cosine_rows(a: Tensor, b: Tensor, eps: float = EPS) -> Tensor:
    """Pairwise cosine similarity between rows: out[i, j] = cos(a_i, b_j).

    The denominator ``|a_i| |b_j|`` is clamped below at ``eps``, so zero rows
    give similarity 0 instead of NaN.  Dot products and squared norms share one
    reduction path, which makes ``cos(v, v)`` come out as exactly 1.
    """
    _check_2d("cosine_rows", a, b)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_rows: width mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    dot = (ad[:, None, :] * bd[None, :, :]).sum(axis=-1)
    na2 = (ad * ad).sum(axis=-1)
    nb2 = (bd * bd).sum(axis=-1)
    den = np.sqrt(na2[:, None] * nb2[None, :])
    live = den >= eps
    den = np.where(live, den, eps)
    cos = dot / den

    def backward(g):
        gd = g / den
        w = np.where(live, g * cos, 0.0)
        ga = gb = None
        if a.requires_grad:
            ga = gd @ bd - w.sum(axis=1)[:, None] * ad / np.where(na2 > 0, na2, 1.0)[:, None]
        if b.requires_grad:
            gb = gd.T @ ad - w.sum(axis=0)[:, None] * bd / np.where(nb2 > 0, nb2, 1.0)[:, None]
        return ga, gb

    return _result(cos, (a, b), backward)


# ---------------------------------------------------------------------------
# loss


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets: Sequence[int], mask: Sequence[bool]) -> Tensor:
    """Mean negative log-likelihood over positions where ``mask`` is true.

    An all-false mask is a degenerate batch: the loss is 0 and so is its gradient.
    """
    _check_2d("cross_entropy", logits)
    L, V = logits.shape
    t = np.asarray(targets, dtype=np.int64)
    m = np.asarray(mask, dtype=bool)
    if t.shape != (L,) or m.shape != (L,):
        raise ShapeError(f"cross_entropy: {L} positions but {t.shape[0]} targets / {m.shape[0]} mask bits")
    n = int(m.sum())
    if n == 0:
        return _result(np.zeros(()), (logits,), lambda g: (np.zeros_like(logits.data),))
    t = np.where(m, t, 0)
    if t.min() < 0 or t.max() >= V:
        raise ShapeError(f"cross_entropy: target id out of range for vocabulary of {V}")
    logp = log_softmax_np(logits.data)
    rows = np.arange(L)
    picked = logp[rows, t]
    loss = -(picked[m]).sum() / n

    def backward(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        return (p * (m[:, None] * (g / n)),)

    return _result(np.asarray(loss), (logits,), backward)
