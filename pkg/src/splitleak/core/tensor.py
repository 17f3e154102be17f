"""Dense float64 tensors with a small reverse-mode tape.

Only the primitives the split transformer and the inversion attack need are
provided. Every primitive accepts arbitrary leading batch dimensions, which
is what lets the attack optimize many prompts at once and lets
:func:`splitleak.core.linalg.jacobian` materialize a Jacobian with a single
batched backward pass.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


class TapeError(RuntimeError):
    pass


class Tensor:
    """Immutable-by-convention wrapper around a float64 ndarray."""

    __slots__ = ("data", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    # operator sugar, all routed through the recorded primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------- tape

class _Node:
    __slots__ = ("out", "inputs", "vjp", "need")

    def __init__(self, out, inputs, vjp, need):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.need = need


_TAPES: list = []


class GradTape:
    """Records primitives applied to watched tensors.

    Use as a context manager; tensors passed to :meth:`watch` become leaves.
    Only operations with at least one tracked input are recorded, so constant
    sub-graphs (weights during an attack, for instance) cost nothing.
    """

    def __init__(self):
        self.nodes: list = []
        self._tracked: dict = {}
        self._leaves: list = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def watch(self, t: Tensor) -> Tensor:
        t = as_tensor(t)
        if id(t) not in self._tracked:
            self._tracked[id(t)] = t
            self._leaves.append(t)
        return t

    def is_tracked(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def gradient(self, output: Tensor, sources: Optional[Sequence[Tensor]] = None) -> list:
        """Gradients of a scalar ``output`` w.r.t. ``sources`` (default: every watched leaf)."""
        if output.size != 1:
            raise ValueError("backward needs a scalar output")
        if id(output) not in self._tracked:
            raise TapeError("output was not produced under this tape")
        sources = self._leaves if sources is None else list(sources)
        grads = {id(output): np.ones_like(output.data)}
        for node in reversed(self.nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            parts = node.vjp(g, node.need)
            for inp, part in zip(node.inputs, parts):
                if part is None or id(inp) not in self._tracked:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + part
                else:
                    grads[key] = part
        return [grads.get(id(s), np.zeros_like(s.data)) if id(s) in self._tracked else None
                for s in sources]


def backward(tape: GradTape, output: Tensor) -> list:
    """Gradient of ``output`` for every leaf watched on ``tape``, in watch order."""
    return tape.gradient(output)


def _finite(arr: np.ndarray, name: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} produced a non-finite value")
    return arr


def _record(name: str, out_data: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    out = Tensor(_finite(out_data, name))
    for tape in _TAPES:
        need = tuple(id(i) in tape._tracked for i in inputs)
        if any(need):
            tape.nodes.append(_Node(out, inputs, vjp, need))
            tape._tracked[id(out)] = out
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------- primitives

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def vjp(g, need):
        ga = gb = None
        if need[0]:
            ga = _unbroadcast(g @ np.swapaxes(B, -1, -2), A.shape)
        if need[1]:
            if B.ndim == 2 and A.ndim > 2:
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape)
        return ga, gb

    return _record("matmul", A @ B, (a, b), vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ValueError(f"add shape mismatch {a.shape} + {b.shape}") from exc
    sa, sb = a.shape, b.shape

    def vjp(g, need):
        return (_unbroadcast(g, sa) if need[0] else None,
                _unbroadcast(g, sb) if need[1] else None)

    return _record("add", out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ValueError(f"sub shape mismatch {a.shape} - {b.shape}") from exc
    sa, sb = a.shape, b.shape

    def vjp(g, need):
        return (_unbroadcast(g, sa) if need[0] else None,
                -_unbroadcast(g, sb) if need[1] else None)

    return _record("sub", out, (a, b), vjp)


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    try:
        out = A * B
    except ValueError as exc:
        raise ValueError(f"mul shape mismatch {a.shape} * {b.shape}") from exc

    def vjp(g, need):
        return (_unbroadcast(g * B, A.shape) if need[0] else None,
                _unbroadcast(g * A, B.shape) if need[1] else None)

    return _record("mul", out, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g, need: (g * c,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record("sigmoid", out, (a,), lambda g, need: (g * out * (1.0 - out),))


def causal_softmax(scores) -> Tensor:
    """Softmax over the last axis of ``(..., L, L)`` scores, masking j > i."""
    s = as_tensor(scores)
    L = s.shape[-1]
    if s.ndim < 2 or s.shape[-2] != L:
        raise ValueError(f"causal_softmax expects (..., L, L), got {s.shape}")
    mask = np.triu(np.ones((L, L), dtype=bool), k=1)
    x = np.where(mask, -np.inf, s.data)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g, need):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record("causal_softmax", p, (s,), vjp)


def rms_norm(x, gain, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain, over the last axis."""
    x, gain = as_tensor(x), as_tensor(gain)
    if gain.shape != (x.shape[-1],):
        raise ValueError(f"rms_norm gain shape {gain.shape} vs input {x.shape}")
    X, G = x.data, gain.data
    n = X.shape[-1]
    r = np.sqrt((X * X).mean(axis=-1, keepdims=True) + eps)
    xhat = X / r

    def vjp(g, need):
        gin = ggain = None
        if need[0]:
            gx = g * G
            gin = (gx - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n) / r
        if need[1]:
            ggain = _unbroadcast(g * xhat, G.shape)
        return gin, ggain

    return _record("rms_norm", xhat * G, (x, gain), vjp)


def take_rows(table, ids) -> Tensor:
    """Row selection ``table[ids]``; gradients scatter back into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"row id out of range [0, {V})")

    def vjp(g, need):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (out,)

    return _record("take_rows", table.data[ids], (table,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g, need: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", a.data.transpose(axes), (a,), lambda g, need: (g.transpose(inv),))


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis)

    def vjp(g, need):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record("sum", np.asarray(out), (a,), vjp)


def cosine_distance(a, b, weights=None) -> Tensor:
    """Per-sample mean over rows of ``1 - cos(a_row, b_row)``.

    Inputs are ``(..., L, D)``; the result has shape ``(...)``. Rows where
    either side has zero norm count as distance 1 and pass no gradient.
    ``weights`` (shape ``(..., L)``) down-weights rows, e.g. padding.
    Only ``a`` receives gradients.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"cosine_distance shape mismatch {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    na = np.linalg.norm(A, axis=-1, keepdims=True)
    nb = np.linalg.norm(B, axis=-1, keepdims=True)
    ok = (na > 0) & (nb > 0)
    u = np.divide(A, na, out=np.zeros_like(A), where=na > 0)
    w = np.divide(B, nb, out=np.zeros(np.broadcast_shapes(B.shape, A.shape)), where=nb > 0)
    # 0.5 * |u - w|^2 equals 1 - cos for unit rows and is exactly 0 for equal directions
    diff = u - w
    row = np.where(ok[..., 0], 0.5 * (diff * diff).sum(axis=-1), 1.0)
    W = np.ones(row.shape) if weights is None else np.broadcast_to(np.asarray(weights, float), row.shape)
    wsum = W.sum(axis=-1)
    out = (row * W).sum(axis=-1) / wsum

    def vjp(g, need):
        cos = (u * w).sum(axis=-1, keepdims=True)
        drow = -(w - cos * u) / np.where(na > 0, na, 1.0)
        drow = np.where(ok, drow, 0.0)
        coef = (np.asarray(g)[..., None] * W / wsum[..., None])[..., None]
        return drow * coef, None

    return _record("cosine_distance", out, (a, b), vjp)


def euclidean_distance(a, b, weights=None) -> Tensor:
    """Per-sample mean over rows of squared Euclidean row distance."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"euclidean_distance shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    row = (diff * diff).sum(axis=-1)
    W = np.ones(row.shape) if weights is None else np.broadcast_to(np.asarray(weights, float), row.shape)
    wsum = W.sum(axis=-1)
    out = (row * W).sum(axis=-1) / wsum

    def vjp(g, need):
        coef = (np.asarray(g)[..., None] * W / wsum[..., None])[..., None]
        return 2.0 * diff * coef, None

    return _record("euclidean_distance", out, (a, b), vjp)


def cross_entropy(logits, targets, weights=None) -> Tensor:
    """Weighted mean next-token cross entropy; ``logits`` is ``(..., V)``."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64)
    X = logits.data
    m = X.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(X - m).sum(axis=-1, keepdims=True))
    logp = X - lse
    picked = np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    W = np.ones(t.shape) if weights is None else np.asarray(weights, float)
    total = W.sum()
    out = -(picked * W).sum() / total

    def vjp(g, need):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, t[..., None], 1.0, axis=-1)
        return (float(g) * (p - onehot) * (W / total)[..., None],)

    return _record("cross_entropy", np.asarray(out), (logits,), vjp)


PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "sigmoid": sigmoid,
    "causal_softmax": causal_softmax,
    "rms_norm": rms_norm,
    "take_rows": take_rows,
    "reshape": reshape,
    "transpose": transpose,
    "sum": sum,
    "cosine_distance": cosine_distance,
    "euclidean_distance": euclidean_distance,
    "cross_entropy": cross_entropy,
}


def forward_op(kind: str, *inputs, **params) -> Tensor:
    """Apply a primitive by name; recorded on any open tape that tracks an input."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **params)
