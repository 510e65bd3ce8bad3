"""Stage-1 training objectives.

Multi-token contrasting (MTC), molecule-text matching (MTM), molecule
captioning (MCap), their weighted sum, and the single-token contrastive
baseline used in ablations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mqformer import MaskMode, MQFormer, MQOutput
from .numerics import Rng, Tensor
from .numerics import tensor as T


@dataclass
class SimMatrix:
    S: Tensor        # (M, M) molecule i -> text j
    S_prime: Tensor  # (M, M) text i -> molecule j


@dataclass
class LossReport:
    mtc: float
    mtm: float
    mcap: float
    total: float
    tau: float
    alpha: float
    total_tensor: Tensor | None = None

    def as_dict(self) -> dict:
        return {"mtc": self.mtc, "mtm": self.mtm, "mcap": self.mcap, "total": self.total,
                "tau": self.tau, "alpha": self.alpha}


def _check_text_mask(pad_mask: np.ndarray) -> np.ndarray:
    pad_mask = np.asarray(pad_mask).astype(bool)
    empty = np.flatnonzero(~pad_mask.any(axis=1))
    if empty.size:
        raise ValueError(f"text(s) {empty.tolist()} contain only padding")
    return pad_mask


def sim_multi(queries: Tensor, text: Tensor, pad_mask) -> SimMatrix:
    """Token-level similarities between query sets and text token sets.

    S(i, j)  = mean over queries k of i, max over real tokens t of j: cos(q_k(i), x_t(j))
    S'(i, j) = mean over real tokens t of i, max over queries k of j: cos(x_t(i), q_k(j))
    """
    real = _check_text_mask(pad_mask)
    m, nq, d = queries.shape
    mt, nt, dt = text.shape
    if m != mt or d != dt:
        raise T.ShapeError(f"sim_multi: queries {queries.shape} vs text {text.shape}")
    qn = T.reshape(T.normalize(queries), (m * nq, d))
    xn = T.reshape(T.normalize(text), (m * nt, d))
    cos = T.reshape(qn @ T.transpose(xn), (m, nq, m, nt))  # [mol, k, text, t]
    filled = T.masked_fill(cos, ~real[None, None, :, :])
    s = T.mean(T.max_(filled, axis=3), axis=1)              # [mol, text]
    best_q = T.max_(cos, axis=1)                            # [mol, text, t]
    w = real / real.sum(axis=1, keepdims=True)
    s_prime_mt = T.sum_(best_q * w[None, :, :].astype(cos.dtype), axis=2)  # [mol, text]
    return SimMatrix(s, T.transpose(s_prime_mt))


def sim_single(queries: Tensor, cls: Tensor) -> SimMatrix:
    """Coarse similarity: max over queries of cos(query, text [CLS]-role row)."""
    m, nq, d = queries.shape
    if cls.shape != (m, d):
        raise T.ShapeError(f"sim_single: CLS rows {cls.shape} do not match queries {queries.shape}")
    qn = T.reshape(T.normalize(queries), (m * nq, d))
    cn = T.normalize(cls)
    cos = T.reshape(qn @ T.transpose(cn), (m, nq, m))
    s = T.max_(cos, axis=1)
    return SimMatrix(s, T.transpose(s))


def infonce(sim: SimMatrix, tau: float) -> Tensor:
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    m = sim.S.shape[0]
    diag = np.arange(m)
    g2t = T.cross_entropy(T.scale(sim.S, 1.0 / tau), diag)
    t2g = T.cross_entropy(T.scale(sim.S_prime, 1.0 / tau), diag)
    return g2t + t2g


def loss_mtc(sim: SimMatrix, tau: float) -> Tensor:
    """Batch mean of the molecule->text plus text->molecule InfoNCE terms."""
    return infonce(sim, tau)


def loss_mtc_single(queries: Tensor, cls: Tensor, tau: float) -> Tensor:
    return infonce(sim_single(queries, cls), tau)


def sample_negatives(m: int, rng: Rng) -> np.ndarray:
    """For each i, a uniformly drawn index j != i."""
    if m < 2:
        raise ValueError("need at least two samples to draw negatives")
    shift = rng.integers(1, m, size=m)
    return (np.arange(m) + shift) % m


def _index_memories(memories: dict, idx: np.ndarray) -> dict:
    return {v: (T.getitem(h, idx), mask[idx]) for v, (h, mask) in memories.items()}


def matching_bce(pos: Tensor, neg_text: Tensor, neg_query: Tensor) -> Tensor:
    """mean_i[-log rho(pos_i) - log(1 - rho(neg_text_i)) - log(1 - rho(neg_query_i))] from logits.

    Negatives use -log(1 - rho): binary cross-entropy on mismatched pairs.
    """
    per = T.neg(T.log_sigmoid(pos)) - T.log_sigmoid(T.neg(neg_text)) - T.log_sigmoid(T.neg(neg_query))
    return T.mean(per)


def loss_mtm(model: MQFormer, memories: dict, text_ids: np.ndarray, text_mask: np.ndarray, rng: Rng) -> Tensor:
    m = text_ids.shape[0]
    if m < 2:
        raise ValueError("loss_mtm needs a batch of at least 2")
    neg_text = sample_negatives(m, rng.child("text"))
    neg_mol = sample_negatives(m, rng.child("mol"))
    ar = np.arange(m)
    mol_idx = np.concatenate([ar, ar, neg_mol])
    txt_idx = np.concatenate([ar, neg_text, ar])
    out = model(_index_memories(memories, mol_idx), text_ids[txt_idx], text_mask[txt_idx], mode=MaskMode.BIMODAL)
    logits = model.match_logits(out)
    return matching_bce(logits[:m], logits[m:2 * m], logits[2 * m:])


def caption_nll(logits: Tensor, text_ids: np.ndarray, text_mask: np.ndarray) -> Tensor:
    """Next-token cross-entropy, averaged per sample over real targets, then over the batch."""
    targets = text_ids[:, 1:]
    real = np.asarray(text_mask[:, 1:], dtype=bool)
    counts = real.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("caption loss needs at least one target token per text")
    weights = real / counts[:, None]
    return T.cross_entropy(logits[:, :-1], targets, mask=weights)


def loss_mcap_terms(model: MQFormer, memories: dict, text_ids: np.ndarray, text_mask: np.ndarray) -> dict:
    """One causal captioning loss per query stream, text seeing only that stream."""
    terms = {}
    for name in model.stream_names:
        out = model(memories, text_ids, text_mask, mode=MaskMode.CAUSAL_TEXT, visible=(name,))
        terms[name] = caption_nll(model.lm_logits(out), text_ids, text_mask)
    return terms


def loss_mcap(model: MQFormer, memories: dict, text_ids: np.ndarray, text_mask: np.ndarray) -> Tensor:
    terms = list(loss_mcap_terms(model, memories, text_ids, text_mask).values())
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def loss_total(mtc: Tensor, mtm: Tensor, mcap: Tensor, tau: float, alpha: float = 2.0) -> LossReport:
    """mtc + mtm + alpha * mcap, combined in 64-bit so the logged total matches its parts."""
    mtc, mtm, mcap = (t.astype(np.float64) for t in (mtc, mtm, mcap))
    total = mtc + mtm + T.scale(mcap, alpha)
    return LossReport(float(mtc.data), float(mtm.data), float(mcap.data), float(total.data), tau, alpha, total)


def contrastive_loss(out: MQOutput, tau: float, kind: str = "multi") -> Tensor:
    if kind == "multi":
        return loss_mtc(sim_multi(out.universal, out.text, out.text_mask), tau)
    if kind == "single":
        return loss_mtc_single(out.universal, out.text[:, 0, :], tau)
    raise ValueError(f"unknown contrastive variant {kind!r}")


def stage1_loss(model: MQFormer, memories: dict, text_ids: np.ndarray, text_mask: np.ndarray, rng: Rng,
                tau: float = 0.1, alpha: float = 2.0, contrastive: str = "multi") -> LossReport:
    """All three Stage-1 terms on one batch, combined as mtc + mtm + alpha * mcap."""
    uni = model(memories, text_ids, text_mask, mode=MaskMode.UNIMODAL)
    mtc = contrastive_loss(uni, tau, contrastive)
    mtm = loss_mtm(model, memories, text_ids, text_mask, rng)
    mcap = loss_mcap(model, memories, text_ids, text_mask)
    return loss_total(mtc, mtm, mcap, tau, alpha)
