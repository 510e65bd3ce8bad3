"""Retrieval and caption metrics, plus query-diversity statistics.

Text is tokenized for metrics by lowercasing and keeping runs of word
characters; whitespace and punctuation are separators.
"""
from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import Tensor, no_grad
from .objectives import sim_multi, sim_single

_WORD = re.compile(r"\w+")


def metric_tokens(text: str) -> list[str]:
    return _WORD.findall(text.lower())


# ---------------------------------------------------------------- retrieval

@dataclass
class RetrievalResult:
    acc_m2t: float
    r20_m2t: float
    acc_t2m: float
    r20_t2m: float
    mode: str
    batch_size: int

    def as_dict(self) -> dict:
        return asdict(self)


def diagonal_ranks(table: np.ndarray) -> np.ndarray:
    """0-based rank of each row's diagonal entry; equal scores at lower indices rank first."""
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2 or table.shape[0] != table.shape[1]:
        raise ValueError(f"score table must be square, got shape {table.shape}")
    diag = np.diag(table)[:, None]
    cols = np.arange(table.shape[1])[None, :]
    rows = np.arange(table.shape[0])[:, None]
    ahead = (table > diag) | ((table == diag) & (cols < rows))
    return ahead.sum(axis=1)


def _row_metrics(table: np.ndarray, k: int = 20) -> tuple[np.ndarray, np.ndarray]:
    table = np.asarray(table, dtype=np.float64)
    ranks = diagonal_ranks(table)
    diag = np.diag(table)[:, None]
    off = ~np.eye(table.shape[0], dtype=bool)
    strict = ~((table >= diag) & off).any(axis=1)
    return strict, ranks < k


def retrieval_eval(S: np.ndarray, S_prime: np.ndarray | None = None, mode: str = "full-set",
                   batch_size: int = 64, k: int = 20) -> RetrievalResult:
    """Accuracy (diagonal is the strict row maximum) and Recall@k in both directions.

    ``S`` scores molecules (rows) against texts; ``S_prime`` scores texts against
    molecules and defaults to ``S.T``. In ``in-batch`` mode the set is cut into
    consecutive chunks of ``batch_size`` and each chunk's sub-table is ranked alone.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"score table must be square, got shape {S.shape}")
    S_prime = S.T if S_prime is None else np.asarray(S_prime, dtype=np.float64)
    if S_prime.shape != S.shape:
        raise ValueError(f"score tables disagree: {S.shape} vs {S_prime.shape}")
    n = S.shape[0]
    if mode == "full-set":
        chunks = [slice(0, n)]
    elif mode == "in-batch":
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        chunks = [slice(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]
    else:
        raise ValueError(f"unknown retrieval mode {mode!r}")
    parts = {"acc_m2t": [], "r20_m2t": [], "acc_t2m": [], "r20_t2m": []}
    for c in chunks:
        a, r = _row_metrics(S[c, c], k)
        parts["acc_m2t"].append(a)
        parts["r20_m2t"].append(r)
        a, r = _row_metrics(S_prime[c, c], k)
        parts["acc_t2m"].append(a)
        parts["r20_t2m"].append(r)
    vals = {key: float(np.concatenate(v).mean()) for key, v in parts.items()}
    return RetrievalResult(mode=mode, batch_size=batch_size if mode == "in-batch" else n, **vals)


def score_tables(queries: np.ndarray, text: np.ndarray, text_mask: np.ndarray, kind: str = "multi",
                 tile: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Full-set S and S' from per-sample query and text features, computed in tiles.

    ``queries`` is (N, nq, d), ``text`` is (N, T, d). The single-token variant
    uses text row 0.
    """
    n = queries.shape[0]
    S = np.zeros((n, n))
    Sp = np.zeros((n, n))
    with no_grad():
        for i in range(0, n, tile):
            for j in range(0, n, tile):
                qi, qj = slice(i, min(i + tile, n)), slice(j, min(j + tile, n))
                S[qi, qj] = _cross_scores(queries[qi], text[qj], text_mask[qj], kind)
                Sp[qj, qi] = _cross_scores(queries[qi], text[qj], text_mask[qj], kind, prime=True).T
    return S, Sp


def _cross_scores(q, x, mask, kind, prime=False):
    # sim_multi wants equal batch sizes; pad the shorter side by repetition and crop
    a, b = q.shape[0], x.shape[0]
    m = max(a, b)
    qi = np.arange(m) % a
    xi = np.arange(m) % b
    if kind == "multi":
        sim = sim_multi(Tensor(q[qi]), Tensor(x[xi]), mask[xi])
        table = sim.S_prime.data.T if prime else sim.S.data
    elif kind == "single":
        table = sim_single(Tensor(q[qi]), Tensor(x[xi][:, 0])).S.data
    else:
        raise ValueError(f"unknown similarity kind {kind!r}")
    return table[:a, :b]


# ---------------------------------------------------------------- captions

def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: list[str], reference: list[str], n: int = 4) -> float:
    """Sentence BLEU: geometric mean of clipped n-gram precisions (1..n), no smoothing."""
    if n not in (2, 4):
        raise ValueError(f"BLEU order must be 2 or 4, got {n}")
    if not candidate:
        return 0.0
    log_p = 0.0
    for k in range(1, n + 1):
        cand = _ngrams(candidate, k)
        total = sum(cand.values())
        if total == 0:
            return 0.0
        ref = _ngrams(reference, k)
        hit = sum(min(c, ref[g]) for g, c in cand.items())
        if hit == 0:
            return 0.0
        log_p += math.log(hit / total) / n
    c, r = len(candidate), len(reference)
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


def _f1(hit: int, n_cand: int, n_ref: int) -> float:
    if hit == 0:
        return 0.0
    p, r = hit / n_cand, hit / n_ref
    return 2 * p * r / (p + r)


def lcs_length(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge(candidate: list[str], reference: list[str], variant="L") -> float:
    """ROUGE-1, ROUGE-2 (n-gram overlap F1) or ROUGE-L (LCS F1)."""
    if not reference:
        raise ValueError("ROUGE needs a non-empty reference")
    variant = str(variant).upper()
    if variant == "L":
        return _f1(lcs_length(candidate, reference), len(candidate), len(reference))
    if variant not in ("1", "2"):
        raise ValueError(f"unknown ROUGE variant {variant!r}")
    n = int(variant)
    cand, ref = _ngrams(candidate, n), _ngrams(reference, n)
    hit = sum((cand & ref).values())
    return _f1(hit, sum(cand.values()), sum(ref.values()))


def align_unigrams(candidate: list[str], reference: list[str]) -> list[tuple[int, int]]:
    """Exact-match alignment: each candidate word takes the first unused equal reference word."""
    used = [False] * len(reference)
    pairs = []
    for i, w in enumerate(candidate):
        for j, r in enumerate(reference):
            if not used[j] and r == w:
                used[j] = True
                pairs.append((i, j))
                break
    return pairs


def meteor_lite(candidate: list[str], reference: list[str]) -> float:
    """Exact-match METEOR: F_mean = 10PR/(R+9P), fragmentation penalty 0.5*(chunks/m)^3."""
    if not candidate or not reference:
        raise ValueError("meteor_lite needs non-empty candidate and reference")
    pairs = align_unigrams(candidate, reference)
    m = len(pairs)
    if m == 0:
        return 0.0
    chunks = 1 + sum(1 for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]) if not (i1 == i0 + 1 and j1 == j0 + 1))
    p, r = m / len(candidate), m / len(reference)
    f_mean = 10 * p * r / (r + 9 * p)
    return f_mean * (1.0 - 0.5 * (chunks / m) ** 3)


@dataclass
class CaptionScores:
    bleu2: float
    bleu4: float
    rouge1: float
    rouge2: float
    rougeL: float
    meteor_lite: float
    exact_match: float
    n: int

    def as_dict(self) -> dict:
        return asdict(self)


def caption_scores(predictions: list[str], references: list[str]) -> CaptionScores:
    """Corpus scores as the mean of per-pair sentence scores."""
    if len(predictions) != len(references):
        raise ValueError(f"{len(predictions)} predictions vs {len(references)} references")
    if not predictions:
        raise ValueError("no caption pairs to score")
    rows = []
    for pred, ref in zip(predictions, references):
        c, r = metric_tokens(pred), metric_tokens(ref)
        rows.append((bleu(c, r, 2), bleu(c, r, 4), rouge(c, r, 1), rouge(c, r, 2), rouge(c, r, "L"),
                     meteor_lite(c, r) if c else 0.0, float(c == r)))
    means = np.asarray(rows, dtype=np.float64).mean(axis=0)
    return CaptionScores(*map(float, means), n=len(rows))


# ---------------------------------------------------------------- diversity

def mean_pairwise_cosine(queries: np.ndarray) -> float:
    """Mean cosine over unordered pairs of rows; a batch (M, n, d) averages per molecule."""
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim == 2:
        q = q[None]
    norms = np.linalg.norm(q, axis=-1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("query rows must be nonzero")
    u = q / norms
    n = u.shape[1]
    if n < 2:
        raise ValueError("need at least two query rows")
    g = u @ u.transpose(0, 2, 1)
    iu = np.triu_indices(n, k=1)
    return float(g[:, iu[0], iu[1]].mean())


def attention_entropy(weights) -> np.ndarray:
    """Entropy in nats of each attention row (last axis)."""
    w = np.asarray(weights, dtype=np.float64)
    safe = np.where(w > 0, w, 1.0)
    return -(w * np.log(safe)).sum(axis=-1)


def query_diversity(queries: np.ndarray, attention_records: list[dict] | None = None) -> dict:
    out = {"mean_pairwise_cosine": mean_pairwise_cosine(queries)}
    if attention_records:
        ent = [float(attention_entropy(r["weights"])) for r in attention_records]
        out["attention_entropy_mean"] = float(np.mean(ent))
        out["attention_entropy"] = ent
    return out
