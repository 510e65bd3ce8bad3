"""Parameter containers and the small set of layers the models are built from."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor owned by a Module. Frozen parameters keep this type."""

    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)


class Module:
    """Attribute-walking parameter registry.

    Parameters are discovered from attributes (Tensors, Modules, and lists of
    Modules) in definition order. A Tensor reachable by two paths is reported
    once, under the first name.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        yield from self._walk(prefix, seen)

    def _walk(self, prefix, seen):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                if id(val) not in seen:
                    seen.add(id(val))
                    yield name, val
            elif isinstance(val, Module):
                yield from val._walk(name + ".", seen)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item._walk(f"{name}.{i}.", seen)
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        yield from item._walk(f"{name}.{k}.", seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = True

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.data.size for p in self.parameters() if p.requires_grad or not trainable_only)


def _param(data: np.ndarray) -> Parameter:
    return Parameter(data)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True, dtype=np.float32, std: float | None = None):
        std = 1.0 / math.sqrt(d_in) if std is None else std
        self.weight = _param(rng.normal((d_in, d_out), std, dtype))
        self.bias = _param(np.zeros(d_out, dtype)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32, eps: float = 1e-5):
        self.gain = _param(np.ones(d, dtype))
        self.shift = _param(np.zeros(d, dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.shift, self.eps)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: Rng, dtype=np.float32, std: float = 0.02):
        self.table = _param(rng.normal((n, d), std, dtype))

    def __call__(self, ids) -> Tensor:
        return T.embedding(self.table, ids)


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng: Rng, dtype=np.float32):
        self.up = Linear(d, hidden, rng.child("up"), dtype=dtype)
        self.down = Linear(hidden, d, rng.child("down"), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(T.gelu(self.up(x)))


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


class MultiHeadAttention(Module):
    """Scaled dot-product attention with optional additive bias and boolean mask.

    ``mask`` is True where attention is forbidden; it must broadcast to
    (batch, heads, n_q, n_k).
    """

    def __init__(self, d: int, heads: int, rng: Rng, dtype=np.float32, d_kv: int | None = None):
        if d % heads:
            raise ValueError(f"model dim {d} not divisible by {heads} heads")
        d_kv = d if d_kv is None else d_kv
        self.q = Linear(d, d, rng.child("q"), dtype=dtype)
        self.k = Linear(d_kv, d, rng.child("k"), dtype=dtype)
        self.v = Linear(d_kv, d, rng.child("v"), dtype=dtype)
        self.o = Linear(d, d, rng.child("o"), dtype=dtype)
        self.heads = heads

    def __call__(self, x: Tensor, memory: Tensor | None = None, mask=None, bias: Tensor | None = None,
                 return_probs: bool = False):
        memory = x if memory is None else memory
        q = split_heads(self.q(x), self.heads)
        k = split_heads(self.k(memory), self.heads)
        v = split_heads(self.v(memory), self.heads)
        dh = q.shape[-1]
        scores = T.scale(q @ T.swapaxes(k, -1, -2), 1.0 / math.sqrt(dh))
        if bias is not None:
            scores = scores + bias
        if mask is not None:
            scores = T.masked_fill(scores, mask)
        probs = T.softmax(scores, axis=-1)
        out = self.o(merge_heads(probs @ v))
        return (out, probs) if return_probs else out
