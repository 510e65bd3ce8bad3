"""Central finite-difference gradient oracle."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .rng import Rng
from .tensor import Tensor, no_grad


def grad_check(f: Callable, x: Tensor | Sequence[Tensor], step: float = 1e-5,
               max_elements: int | None = None, rng: Rng | None = None, refine: bool = False,
               tol: float = 1e-4, stats: dict | None = None) -> float:
    """Max relative error between backprop gradients and central differences.

    Error per element is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    ``x`` may be one tensor or several; ``f(x)`` must return a scalar tensor.
    With ``max_elements`` set, that many coordinates are sampled (at least one
    per tensor) instead of sweeping every element.

    With ``refine``, a coordinate whose error exceeds ``tol`` is re-measured at
    step/10 and step/100 and keeps the smallest error. This separates a
    stencil that straddles a kink (e.g. a near-tie inside max) from a wrong
    gradient, which disagrees at every step size. ``stats`` (if given)
    receives the count of refined coordinates.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.data.dtype != np.float64:
            raise TypeError("grad_check requires 64-bit tensors")
        t.grad = None
    loss = f(x)
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]
    for t in xs:
        t.grad = None

    coords = _coordinates(xs, max_elements, rng)
    worst = 0.0
    with no_grad():
        refined = 0
        for ti, flat in coords:
            data = xs[ti].data.reshape(-1)
            ana = float(analytic[ti].reshape(-1)[flat])
            err = _rel_err(ana, _central(f, x, data, flat, step))
            if refine and err > tol:
                refined += 1
                for h in (step / 10, step / 100):
                    err = min(err, _rel_err(ana, _central(f, x, data, flat, h)))
            worst = max(worst, err)
    if stats is not None:
        stats["refined"] = stats.get("refined", 0) + refined
    return worst


def _central(f, x, data, flat, h) -> float:
    orig = data[flat]
    data[flat] = orig + h
    fp = float(f(x).data)
    data[flat] = orig - h
    fm = float(f(x).data)
    data[flat] = orig
    return (fp - fm) / (2 * h)


def _rel_err(ana: float, num: float) -> float:
    return abs(ana - num) / max(abs(ana), abs(num), 1e-8)


def _coordinates(xs, max_elements, rng):
    all_coords = [(i, j) for i, t in enumerate(xs) for j in range(t.data.size)]
    if max_elements is None or max_elements >= len(all_coords):
        return all_coords
    rng = rng or Rng(0)
    picked = {(i, int(rng.integers(0, t.data.size))) for i, t in enumerate(xs) if t.data.size}
    rest = [c for c in all_coords if c not in picked]
    extra = max(0, max_elements - len(picked))
    if extra and rest:
        idx = rng.choice(len(rest), size=min(extra, len(rest)), replace=False)
        picked.update(rest[k] for k in idx)
    return sorted(picked)
