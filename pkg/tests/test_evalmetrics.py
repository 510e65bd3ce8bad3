import math

import numpy as np
import pytest

from molalign.evalmetrics import (attention_entropy, bleu, caption_scores, diagonal_ranks, lcs_length,
                                  mean_pairwise_cosine, meteor_lite, metric_tokens, retrieval_eval, rouge,
                                  score_tables)
from molalign.numerics import Tensor
from molalign.objectives import sim_multi

# (candidate, reference, bleu2, bleu4, rouge1, rouge2, rougeL, meteor), each worked by hand
FIXTURES = [
    ("the cat sat", "the cat sat down",
     math.exp(-1 / 3), 0.0, 6 / 7, 4 / 5, 6 / 7, (7.5 / 9.75) * (1 - 0.5 / 27)),
    ("a b c d", "a c d b",
     math.sqrt(1 / 3), 0.0, 1.0, 1 / 3, 3 / 4, 1 - 0.5 * (3 / 4) ** 3),
    ("the molecule is an acid", "the molecule is an acid",
     1.0, 1.0, 1.0, 1.0, 1.0, 1 - 0.5 * (1 / 5) ** 3),
    ("x y", "a b c",
     0.0, 0.0, 0.0, 0.0, 0.0, 0.0),
    ("the acid is a molecule", "the molecule is an acid",
     0.0, 0.0, 0.8, 0.0, 0.4, 0.8 * 0.5),
]


@pytest.mark.parametrize("cand,ref,b2,b4,r1,r2,rl,met", FIXTURES)
def test_caption_metric_fixtures(cand, ref, b2, b4, r1, r2, rl, met):
    c, r = metric_tokens(cand), metric_tokens(ref)
    assert bleu(c, r, 2) == pytest.approx(b2, abs=1e-6)
    assert bleu(c, r, 4) == pytest.approx(b4, abs=1e-6)
    assert rouge(c, r, 1) == pytest.approx(r1, abs=1e-6)
    assert rouge(c, r, 2) == pytest.approx(r2, abs=1e-6)
    assert rouge(c, r, "L") == pytest.approx(rl, abs=1e-6)
    assert meteor_lite(c, r) == pytest.approx(met, abs=1e-6)


def test_bleu4_with_full_overlap_and_brevity():
    c = "a b c d e".split()
    r = "a b c d e f".split()
    assert bleu(c, r, 4) == pytest.approx(math.exp(1 - 6 / 5), abs=1e-12)


def test_bleu_clipping():
    # "the the the" vs "the cat": unigram precision clipped to 1/3, bigrams 0
    assert bleu("the the the".split(), "the cat".split(), 2) == 0.0
    assert bleu([], ["a"], 2) == 0.0
    with pytest.raises(ValueError):
        bleu(["a"], ["a"], 3)


def test_lcs_oracle():
    assert lcs_length("a b c d".split(), "a c d b".split()) == 3
    assert lcs_length([], ["a"]) == 0


def test_rouge_errors():
    with pytest.raises(ValueError):
        rouge(["a"], [], 1)
    with pytest.raises(ValueError):
        rouge(["a"], ["a"], 3)


def test_metric_tokenization():
    assert metric_tokens("The molecule, Rings1 .") == ["the", "molecule", "rings1"]


def test_caption_scores_identical_and_bounded():
    refs = ["the compact molecule with rings1", "an acid ."]
    s = caption_scores(refs, refs)
    assert s.bleu2 == 1.0 and s.rougeL == 1.0 and s.exact_match == 1.0
    s = caption_scores(["zzz", "an acid"], refs)
    for v in (s.bleu2, s.bleu4, s.rouge1, s.rouge2, s.rougeL, s.meteor_lite, s.exact_match):
        assert 0.0 <= v <= 1.0


# ---- retrieval

def brute_retrieval(table, k):
    n = table.shape[0]
    acc, rk = [], []
    for i in range(n):
        order = sorted(range(n), key=lambda j: (-table[i, j], j))
        acc.append(all(table[i, i] > table[i, j] for j in range(n) if j != i))
        rk.append(order.index(i) < k)
    return np.mean(acc), np.mean(rk)


@pytest.mark.parametrize("seed", range(20))
def test_retrieval_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    S = rng.integers(0, 4, size=(10, 10)).astype(float)  # small range forces ties
    Sp = rng.normal(size=(10, 10))
    for k in (1, 3, 20):
        res = retrieval_eval(S, Sp, k=k)
        a, r = brute_retrieval(S, k)
        assert res.acc_m2t == a and res.r20_m2t == r
        a, r = brute_retrieval(Sp, k)
        assert res.acc_t2m == a and res.r20_t2m == r


def test_identity_and_antidiagonal():
    res = retrieval_eval(np.eye(5))
    assert (res.acc_m2t, res.r20_m2t, res.acc_t2m, res.r20_t2m) == (1.0, 1.0, 1.0, 1.0)
    anti = np.fliplr(np.eye(3))
    assert retrieval_eval(anti).acc_m2t == pytest.approx(1 / 3)
    assert retrieval_eval(anti).r20_m2t == 1.0


def test_tie_breaking_lower_index_first():
    t = np.ones((3, 3))
    np.testing.assert_array_equal(diagonal_ranks(t), [0, 1, 2])
    assert retrieval_eval(t).acc_m2t == 0.0


def test_non_square_rejected():
    with pytest.raises(ValueError):
        retrieval_eval(np.zeros((2, 3)))


def test_in_batch_chunks():
    rng = np.random.default_rng(0)
    S = rng.normal(size=(130, 130))
    res = retrieval_eval(S, mode="in-batch", batch_size=64)
    accs = []
    for s in range(0, 130, 64):
        c = slice(s, min(s + 64, 130))
        accs.extend(diagonal_ranks(S[c, c]) == 0)
    assert res.acc_m2t == pytest.approx(np.mean(accs))
    assert res.r20_m2t >= res.acc_m2t


def test_full_set_tiles_match_direct():
    rng = np.random.default_rng(1)
    q = rng.normal(size=(7, 2, 4))
    x = rng.normal(size=(7, 3, 4))
    mask = np.ones((7, 3), dtype=np.int64)
    mask[2, 2] = 0
    S, Sp = score_tables(q, x, mask, tile=3)
    sim = sim_multi(Tensor(q), Tensor(x), mask)
    np.testing.assert_allclose(S, sim.S.data, atol=1e-12)
    np.testing.assert_allclose(Sp, sim.S_prime.data, atol=1e-12)


# ---- diversity

def test_query_diversity_limits():
    same = np.tile(np.arange(1.0, 5.0), (4, 1))
    assert mean_pairwise_cosine(same) == pytest.approx(1.0)
    assert mean_pairwise_cosine(np.eye(4)) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        mean_pairwise_cosine(np.zeros((2, 3)))


def test_uniform_attention_entropy():
    assert attention_entropy(np.full(7, 1 / 7)) == pytest.approx(math.log(7))
    assert attention_entropy(np.array([1.0, 0.0])) == 0.0
