"""Dense tensors with reverse-mode automatic differentiation.

Every primitive builds its output eagerly with numpy and registers a closure
that maps the output gradient to input gradients. ``backward`` walks the graph
in reverse topological order.

Broadcasting between two tensors is limited to bias-style adds: the smaller
operand's shape must be a suffix of the larger one. Plain numpy arrays and
Python scalars act as constants and may broadcast freely.
"""
from __future__ import annotations

import contextlib
import math
from typing import Iterable, Sequence

import numpy as np

MASK_FILL = -1e9

_STATE = {"grad": True, "deterministic": False}


@contextlib.contextmanager
def no_grad():
    prev = _STATE["grad"]
    _STATE["grad"] = False
    try:
        yield
    finally:
        _STATE["grad"] = prev


@contextlib.contextmanager
def deterministic(flag: bool = True):
    """Disable dropout (and any other stochastic layer) inside the block."""
    prev = _STATE["deterministic"]
    _STATE["deterministic"] = flag
    try:
        yield
    finally:
        _STATE["deterministic"] = prev


def set_deterministic(flag: bool) -> None:
    _STATE["deterministic"] = flag


def is_deterministic() -> bool:
    return _STATE["deterministic"]


def grad_enabled() -> bool:
    return _STATE["grad"]


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def precision(self) -> int:
        return 64 if self.data.dtype == np.float64 else 32

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        out = _make(self.data.astype(dtype), (self,))
        if out.requires_grad:
            src = self.data.dtype
            out._backward = lambda g: (g.astype(src),)
        return out

    # -- autograd ------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topo(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _raise_not_scalar(t: Tensor):
    raise ShapeError(f"item: tensor of shape {t.shape} is not a scalar")


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._backward = None
    if _STATE["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
    else:
        out.requires_grad = False
        out._parents = ()
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_bias_broadcast(name: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    small, big = (sb, sa) if len(sb) <= len(sa) else (sa, sb)
    if len(small) <= len(big) and big[len(big) - len(small):] == small:
        return
    raise ShapeError(f"{name}: shapes {sa} and {sb} are not equal and neither is a trailing suffix of the other")


def _binary_operands(name, a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _check_bias_broadcast(name, a, b)
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    raise TypeError(f"{name}: at least one operand must be a Tensor")


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands("add", a, b)
    out = _make(a.data + b.data, (a, b))
    if out.requires_grad:
        sa, sb = a.shape, b.shape
        out._backward = lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    return out


def sub(a, b) -> Tensor:
    a, b = _binary_operands("sub", a, b)
    out = _make(a.data - b.data, (a, b))
    if out.requires_grad:
        sa, sb = a.shape, b.shape
        out._backward = lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))
    return out


def mul(a, b) -> Tensor:
    a, b = _binary_operands("mul", a, b)
    out = _make(a.data * b.data, (a, b))
    if out.requires_grad:
        sa, sb = a.shape, b.shape
        out._backward = lambda g: (
            _unbroadcast(g * b.data, sa) if a.requires_grad else None,
            _unbroadcast(g * a.data, sb) if b.requires_grad else None,
        )
    return out


def div(a, b) -> Tensor:
    a, b = _binary_operands("div", a, b)
    out = _make(a.data / b.data, (a, b))
    if out.requires_grad:
        sa, sb = a.shape, b.shape
        out._backward = lambda g: (
            _unbroadcast(g / b.data, sa) if a.requires_grad else None,
            _unbroadcast(-g * a.data / (b.data * b.data), sb) if b.requires_grad else None,
        )
    return out


def neg(a: Tensor) -> Tensor:
    out = _make(-a.data, (a,))
    if out.requires_grad:
        out._backward = lambda g: (-g,)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = _make(a.data * a.dtype.type(s), (a,))
    if out.requires_grad:
        out._backward = lambda g: (g * g.dtype.type(s),)
    return out


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = _make(y, (a,))
    if out.requires_grad:
        out._backward = lambda g: (g * y,)
    return out


def log(a: Tensor) -> Tensor:
    out = _make(np.log(a.data), (a,))
    if out.requires_grad:
        out._backward = lambda g: (g / a.data,)
    return out


def square(a: Tensor) -> Tensor:
    out = _make(a.data * a.data, (a,))
    if out.requires_grad:
        out._backward = lambda g: (2 * g * a.data,)
    return out


def relu(a: Tensor) -> Tensor:
    out = _make(np.maximum(a.data, 0), (a,))
    if out.requires_grad:
        out._backward = lambda g: (g * (a.data > 0),)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    inner = c * (x + k * (x * x * x))
    t = np.tanh(inner)
    out = _make(0.5 * x * (1 + t), (a,))
    if out.requires_grad:
        def _bw(g):
            dinner = c * (1 + 3 * k * x * x)
            return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)
        out._backward = _bw
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _stable_sigmoid(a.data)
    out = _make(y, (a,))
    if out.requires_grad:
        out._backward = lambda g: (g * y * (1 - y),)
    return out


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return out


def log_sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x)))
    out = _make(y, (a,))
    if out.requires_grad:
        out._backward = lambda g: (g * _stable_sigmoid(-x),)
    return out


# -- linear algebra & shape ----------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need >= 2 dims, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape} ({a.shape[-1]} != {b.shape[-2]})")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape[:-2]} vs {b.shape[:-2]}")
    out = _make(np.matmul(a.data, b.data), (a, b))
    if out.requires_grad:
        def _bw(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
            gb = None
            if b.requires_grad:
                if b.ndim == 2 and a.ndim > 2:
                    a2 = a.data.reshape(-1, a.shape[-1])
                    gb = a2.T @ g.reshape(-1, g.shape[-1])
                else:
                    gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            return ga, gb
        out._backward = _bw
    return out


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {src} into {tuple(shape)}") from e
    out = _make(y, (a,))
    if out.requires_grad:
        out._backward = lambda g: (g.reshape(src),)
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    out = _make(np.transpose(a.data, axes), (a,))
    if out.requires_grad:
        out._backward = lambda g: (np.transpose(g, inv),)
    return out


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def getitem(a: Tensor, idx) -> Tensor:
    out = _make(a.data[idx], (a,))
    if out.requires_grad:
        shape, dtype = a.shape, a.dtype

        def _bw(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, idx, g)
            return (full,)
        out._backward = _bw
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    out = _make(np.concatenate([t.data for t in tensors], axis=ax), tensors)
    if out.requires_grad:
        bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

        def _bw(g):
            return tuple(np.split(g, bounds, axis=ax))
        out._backward = _bw
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# -- reductions ----------------------------------------------------------

def _expand(g: np.ndarray, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,))
    if out.requires_grad:
        shape = a.shape
        out._backward = lambda g: (np.array(_expand(g, shape, axis, keepdims)),)
    return out


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    out = _make(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,))
    if out.requires_grad:
        shape = a.shape
        out._backward = lambda g: (np.array(_expand(g, shape, axis, keepdims)) / n,)
    return out


def max_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = np.asarray(a.data.max(axis=axis, keepdims=True))
    out = _make(y if keepdims else np.asarray(a.data.max(axis=axis)), (a,))
    if out.requires_grad:
        hit = (a.data == y)
        # ties share the gradient evenly
        share = hit / hit.sum(axis=axis, keepdims=True)

        def _bw(g):
            gk = g if keepdims else (g.reshape((1,) * a.ndim) if axis is None else np.expand_dims(g, axis))
            return (share * gk,)
        out._backward = _bw
    return out


# -- neural-network primitives ---------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _make(y, (a,))
    if out.requires_grad:
        out._backward = lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    y = x - lse
    out = _make(y, (a,))
    if out.requires_grad:
        p = np.exp(y)
        out._backward = lambda g: (g - p * g.sum(axis=axis, keepdims=True),)
    return out


def masked_fill(a: Tensor, mask, value: float = MASK_FILL) -> Tensor:
    """Replace entries where ``mask`` is true by ``value`` (default -1e9)."""
    mask = np.asarray(mask, dtype=bool)
    try:
        full = np.broadcast_to(mask, a.shape)
    except ValueError as e:
        raise ShapeError(f"masked_fill: mask {mask.shape} does not broadcast to {a.shape}") from e
    out = _make(np.where(full, a.dtype.type(value), a.data), (a,))
    if out.requires_grad:
        out._backward = lambda g: (np.where(full, 0, g).astype(g.dtype),)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias shapes {gamma.shape}/{beta.shape} do not match feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = _make(xhat * gamma.data + beta.data, (x, gamma, beta))
    if out.requires_grad:
        def _bw(g):
            gx = None
            if x.requires_grad:
                gh = g * gamma.data
                gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                            - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            gg = (g * xhat).reshape(-1, d).sum(axis=0) if gamma.requires_grad else None
            gb = g.reshape(-1, d).sum(axis=0) if beta.requires_grad else None
            return gx, gg, gb
        out._backward = _bw
    return out


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table with {table.shape[0]} rows")
    out = _make(table.data[ids], (table,))
    if out.requires_grad:
        def _bw(g):
            flat = ids.reshape(-1)
            rows = g.reshape(-1, table.shape[1])
            if flat.size * table.shape[0] <= 4_000_000:
                onehot = np.zeros((table.shape[0], flat.size), dtype=g.dtype)
                onehot[flat, np.arange(flat.size)] = 1
                return (onehot @ rows,)
            full = np.zeros_like(table.data)
            np.add.at(full, flat, rows)
            return (full,)
        out._backward = _bw
    return out


def normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """L2-normalize along ``axis``."""
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    n = np.maximum(norm, a.dtype.type(eps))
    y = a.data / n
    out = _make(y, (a,))
    if out.requires_grad:
        def _bw(g):
            return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,)
        out._backward = _bw
    return out


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    return sum_(mul(normalize(a, axis), normalize(b, axis)), axis=axis)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``.

    ``mask`` (same shape as targets) selects the positions that count.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    nv = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= nv):
        raise ShapeError(f"cross_entropy: target ids out of range [0, {nv})")
    w = np.ones(targets.shape, dtype=logits.dtype) if mask is None else np.asarray(mask, dtype=logits.dtype)
    count = w.sum()
    if count <= 0:
        raise ValueError("cross_entropy: no target positions selected")
    x = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=-1, keepdims=True))
    logp = x - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    out = _make(np.asarray(-(picked * w).sum() / count, dtype=logits.dtype), (logits,))
    if out.requires_grad:
        def _bw(g):
            p = np.exp(logp)
            onehot = np.zeros_like(p)
            np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
            return (g * (p - onehot) * (w / count)[..., None],)
        out._backward = _bw
    return out


def dropout(a: Tensor, p: float, rng) -> Tensor:
    if p <= 0.0 or _STATE["deterministic"]:
        return a
    if p >= 1.0:
        raise ValueError("dropout: p must be < 1")
    keep = (rng.uniform(a.shape) >= p).astype(a.dtype) / a.dtype.type(1.0 - p)
    out = _make(a.data * keep, (a,))
    if out.requires_grad:
        out._backward = lambda g: (g * keep,)
    return out


def zeros_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
