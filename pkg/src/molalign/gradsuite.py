"""64-bit finite-difference suite over every Stage-1 loss term.

Each micro-batch builds a fresh tiny MQ-Former (M=3 pairs, K=2 queries per
view, T<=4 text tokens, d=8) and checks backprop against central differences
for the contrastive, matching, captioning and combined losses.

Key-projection biases are left out of the sampled coordinates: adding a
constant to every key shifts each attention score row uniformly, so their true
gradient is exactly zero and a relative error there measures only
finite-difference noise. The suite instead asserts their backprop gradient
is zero to round-off.

The max() inside multi-token similarity is not differentiable at ties; a
coordinate whose stencil straddles one is re-measured at smaller steps
(``grad_check(refine=True)``) and counted in ``refined_coordinates``.
"""
from __future__ import annotations

import time

import numpy as np

from .mqformer import MaskMode, MQFormer
from .numerics import Rng, Tensor, grad_check
from .objectives import contrastive_loss, loss_mcap, loss_mtm, stage1_loss

TOLERANCE = 1e-4
ZERO_GRAD_TOL = 1e-10
STEP = 1e-5


def micro_batch(seed: int, m: int = 3, k: int = 2, t: int = 4, d: int = 8, vocab: int = 11):
    rng = np.random.default_rng(seed)
    model = MQFormer(vocab, d=d, d_enc=d, n_queries=k, blocks=1, heads=2, max_len=t,
                     rng=Rng(seed).child("micro"), dtype=np.float64)
    mem = {}
    for view in ("2d", "3d"):
        n_atoms = int(rng.integers(2, 5))
        mask = np.ones((m, n_atoms), dtype=bool)
        mask[0, n_atoms - 1] = False
        mem[view] = (Tensor(rng.normal(size=(m, n_atoms, d))), mask)
    ids = rng.integers(5, vocab, size=(m, t))
    ids[:, 0] = 2
    mask = np.ones((m, t), dtype=np.int64)
    mask[-1, t - 1] = 0
    ids[mask == 0] = 0
    return model, mem, ids, mask


def _checked(model: MQFormer):
    keep, zero = [], []
    for name, p in model.named_parameters():
        (zero if name.endswith("k.bias") else keep).append(p)
    return keep, zero


def loss_terms(model, mem, ids, mask, seed: int) -> dict:
    def mtc(_):
        return contrastive_loss(model(mem, ids, mask, mode=MaskMode.UNIMODAL), 0.1, "multi")

    def mtc_single(_):
        return contrastive_loss(model(mem, ids, mask, mode=MaskMode.UNIMODAL), 0.1, "single")

    return {
        "mtc": mtc,
        "mtc_single": mtc_single,
        "mtm": lambda _: loss_mtm(model, mem, ids, mask, Rng(seed).child("neg")),
        "mcap": lambda _: loss_mcap(model, mem, ids, mask),
        "total": lambda _: stage1_loss(model, mem, ids, mask, Rng(seed).child("neg")).total_tensor,
    }


def run_suite(n_batches: int = 10, seed: int = 0, max_elements: int = 40) -> dict:
    t0 = time.time()
    worst: dict[str, float] = {}
    zero_worst = 0.0
    stats: dict = {}
    for b in range(n_batches):
        s = seed * 1000 + b
        model, mem, ids, mask = micro_batch(s)
        keep, zero = _checked(model)
        for name, f in loss_terms(model, mem, ids, mask, s).items():
            err = grad_check(f, keep, step=STEP, max_elements=max_elements, rng=Rng(s).child(name),
                             refine=True, tol=TOLERANCE, stats=stats)
            worst[name] = max(worst.get(name, 0.0), err)
            for p in zero:
                p.grad = None
            f(None).backward()
            zero_worst = max([zero_worst] + [float(np.abs(p.grad).max()) for p in zero if p.grad is not None])
            for p in model.parameters():
                p.grad = None
    overall = max(worst.values()) if worst else 0.0
    return {"per_term": worst, "max_rel_error": overall, "zero_gradient_max_abs": zero_worst,
            "refined_coordinates": stats.get("refined", 0),
            "tolerance": TOLERANCE, "batches": n_batches, "seconds": round(time.time() - t0, 2),
            "passed": overall <= TOLERANCE and zero_worst <= ZERO_GRAD_TOL}
