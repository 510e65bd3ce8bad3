"""AdamW with a linear-warmup, per-epoch exponential-decay learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


class MissingGradError(RuntimeError):
    pass


@dataclass
class WarmupDecay:
    """lr(step, epoch) = base_lr * min(1, step / warmup) * decay ** epoch.

    ``step`` counts optimizer steps from 1; ``epoch`` counts completed epochs.
    """

    base_lr: float
    warmup: int = 200
    decay: float = 0.9

    def __call__(self, step: int, epoch: int = 0) -> float:
        ramp = 1.0 if self.warmup <= 0 else min(1.0, step / self.warmup)
        return self.base_lr * ramp * self.decay ** epoch


class AdamW:
    def __init__(self, named_params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, schedule: WarmupDecay | None = None, allow_missing: bool = False):
        """``allow_missing`` skips parameters that got no gradient this step instead of raising."""
        self.params: list[tuple[str, Tensor]] = [(n, p) for n, p in named_params if p.requires_grad]
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.allow_missing = allow_missing
        self.t = 0
        self.epoch = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def current_lr(self, step: int | None = None) -> float:
        step = self.t + 1 if step is None else step
        return self.schedule(step, self.epoch) if self.schedule is not None else self.lr

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> float:
        missing = [n for n, p in self.params if p.grad is None]
        if missing and not self.allow_missing:
            raise MissingGradError(f"no gradient for parameter(s): {', '.join(missing)}")
        self.t += 1
        lr = self.current_lr(self.t)
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            dt = p.data.dtype.type
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                p.data *= dt(1.0 - lr * self.weight_decay)
            p.data -= dt(lr) * update.astype(p.data.dtype)
        return lr

    def end_epoch(self) -> None:
        self.epoch += 1
