import numpy as np
import pytest

from molalign.mqformer import (MaskMode, MQFormer, concat_universal, export_attention, read_attention,
                               split_universal)
from molalign.numerics import Rng, Tensor, grad_check
from molalign.numerics import tensor as T


def memories(b, n=(5, 5), d_enc=16, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    out = {}
    for view, na in zip(("2d", "3d"), n):
        mask = np.ones((b, na), dtype=bool)
        mask[0, na - 1:] = False
        out[view] = (Tensor(rng.normal(size=(b, na, d_enc)).astype(dtype)), mask)
    return out


def texts(b, t=6, vocab=20, seed=1):
    rng = np.random.default_rng(seed)
    ids = rng.integers(5, vocab, size=(b, t))
    ids[:, 0] = 2
    mask = np.ones((b, t), dtype=np.int64)
    mask[-1, t - 2:] = 0
    ids[mask == 0] = 0
    return ids, mask


def small(views="both", k=2, blocks=2, dtype=np.float32, seed=3):
    return MQFormer(20, d=16, d_enc=16, n_queries=k, blocks=blocks, heads=2, views=views, rng=Rng(seed), dtype=dtype)


def test_universal_query_shape():
    m = MQFormer(20, d=64, d_enc=16, n_queries=12, blocks=1, heads=4)
    out = m(memories(2))
    assert out.universal.shape == (2, 24, 64)
    assert out.text is None


def test_zero_blocks_returns_initial_queries():
    m = small(blocks=0)
    out = m(memories(2))
    np.testing.assert_array_equal(out.queries["2d"].data[1], m.queries["2d"].data)
    np.testing.assert_array_equal(out.queries["3d"].data[0], m.queries["3d"].data)


def test_unimodal_text_independent_of_molecule():
    m = small()
    ids, mask = texts(2)
    a = m(memories(2, seed=0), ids, mask, mode=MaskMode.UNIMODAL).text.data
    b = m(memories(2, n=(7, 3), seed=9), ids, mask, mode=MaskMode.UNIMODAL).text.data
    assert np.array_equal(a, b)


def test_bimodal_text_depends_on_molecule():
    m = small()
    ids, mask = texts(2)
    a = m(memories(2, seed=0), ids, mask, mode=MaskMode.BIMODAL).text.data
    b = m(memories(2, seed=9), ids, mask, mode=MaskMode.BIMODAL).text.data
    assert np.abs(a - b).max() > 1e-4


def test_causal_text_ignores_future_tokens():
    m = small()
    mem = memories(2)
    ids, mask = texts(2, t=8)
    mask[:] = 1
    base = m.lm_logits(m(mem, ids, mask, mode=MaskMode.CAUSAL_TEXT)).data
    ids2 = ids.copy()
    ids2[:, 5:] = 7
    pert = m.lm_logits(m(mem, ids2, mask, mode=MaskMode.CAUSAL_TEXT)).data
    assert np.array_equal(base[:, :5], pert[:, :5])
    assert np.abs(base[:, 5:] - pert[:, 5:]).max() > 0


def test_causal_visible_stream_restricts_conditioning():
    m = small()
    ids, mask = texts(2)
    mem_a = memories(2, seed=0)
    mem_b = dict(mem_a)
    mem_b["3d"] = memories(2, seed=5)["3d"]
    a = m(mem_a, ids, mask, mode=MaskMode.CAUSAL_TEXT, visible=("2d",)).text.data
    b = m(mem_b, ids, mask, mode=MaskMode.CAUSAL_TEXT, visible=("2d",)).text.data
    assert np.array_equal(a, b)


def test_self_attention_shared_across_branches():
    m = small()
    for blk in m.blocks:
        assert blk.branch_self_attention("2d") is blk.branch_self_attention("3d") is blk.branch_self_attention("text")
    names = [n for n, _ in m.named_parameters() if "self_attn" in n]
    assert len(names) == len(m.blocks) * 8  # q, k, v, o weights and biases, once per block


def test_batch_items_independent():
    m = small(dtype=np.float64)
    mem = memories(3, dtype=np.float64)
    ids, mask = texts(3)
    full = m(mem, ids, mask, mode=MaskMode.BIMODAL).universal.data
    one = m({k: (Tensor(h.data[1:2]), am[1:2]) for k, (h, am) in mem.items()}, ids[1:2], mask[1:2],
            mode=MaskMode.BIMODAL).universal.data
    np.testing.assert_allclose(full[1:2], one, atol=1e-12)


def test_concat_split_roundtrip_and_gradient():
    a = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), requires_grad=True)
    b = Tensor(np.random.default_rng(1).normal(size=(2, 3, 4)), requires_grad=True)
    u = concat_universal(a, b)
    assert u.shape == (2, 6, 4)
    x, y = split_universal(u)
    np.testing.assert_array_equal(x.data, a.data)
    np.testing.assert_array_equal(y.data, b.data)
    T.sum_(u).backward()
    np.testing.assert_array_equal(a.grad, np.ones_like(a.data))
    np.testing.assert_array_equal(b.grad, np.ones_like(b.data))


def test_concat_shape_mismatch():
    with pytest.raises(T.ShapeError):
        concat_universal(Tensor(np.zeros((1, 2, 4))), Tensor(np.zeros((1, 3, 4))))


def test_missing_view_rejected():
    m = small()
    mem = memories(2)
    del mem["3d"]
    with pytest.raises(ValueError, match="3d"):
        m(mem)


@pytest.mark.parametrize("views,streams", [("2d", ["2d"]), ("3d", ["3d"]), ("precombined", ["pre"])])
def test_view_modes(views, streams):
    m = small(views=views, k=2)
    out = m(memories(2))
    assert list(out.queries) == streams
    assert out.universal.shape == (2, 4 if views == "precombined" else 2, 16)


def test_unknown_views():
    with pytest.raises(ValueError):
        small(views="4d")


def test_forward_gradient_float64():
    m = small(dtype=np.float64, blocks=1)
    mem = memories(2, dtype=np.float64)
    ids, mask = texts(2, t=4)
    w = np.random.default_rng(2).normal(size=(2, 4, 16))
    f = lambda _: T.sum_(m(mem, ids, mask, mode=MaskMode.BIMODAL).universal * w)
    # key biases shift every score of a query equally, so their true gradient is 0
    params = [p for n, p in m.named_parameters() if not n.endswith("k.bias")]
    assert grad_check(f, params, max_elements=80, rng=Rng(0)) < 1e-4


def test_attention_export(tmp_path):
    m = small()
    mem = memories(2)
    ids, mask = texts(2)

    class V:
        def token(self, i):
            return f"w{i}"

    path = tmp_path / "attn.jsonl"
    n = export_attention(m, mem, ids, mask, ["a", "b"], V(), layer=1, path=path, mode=MaskMode.UNIMODAL)
    recs = read_attention(path)
    assert n == len(recs) == 2 * 4 * 2  # samples x queries x heads
    for r in recs:
        w = np.array(r["weights"])
        assert len(w) == len(r["tokens"])
        assert abs(w.sum() - 1.0) < 1e-5
        assert np.all(w[4:] == 0)  # queries see no text under UNIMODAL
        assert len(r["query_vector"]) == 16
    assert {r["query_view"] for r in recs} == {"2d", "3d"}


def test_attention_export_bad_layer(tmp_path):
    m = small()
    ids, mask = texts(2)
    with pytest.raises(IndexError):
        export_attention(m, memories(2), ids, mask, ["a", "b"], None, layer=5, path=tmp_path / "x")
