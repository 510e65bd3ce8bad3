"""Multi-querying transformer.

Each block runs one self-attention layer over the joint token stream
``[2D queries | 3D queries | text]``; the same weights serve every branch.
Query streams then cross-attend to their own view's atom representations and
every branch has its own feed-forward layer. Which stream may see which is set
by a :class:`MaskMode`.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import FeedForward, LayerNorm, Linear, Module, Rng, Tensor
from .numerics import nn
from .numerics import tensor as T
from .numerics.nn import Parameter

VIEW_MODES = ("both", "2d", "3d", "precombined")


class MaskMode(enum.Enum):
    UNIMODAL = "unimodal"        # queries<->queries, text<->text
    BIMODAL = "bimodal"          # everything
    CAUSAL_TEXT = "causal_text"  # text causal over itself, sees queries; queries blind to text


@dataclass
class QueryStream:
    name: str
    n_queries: int
    sources: tuple[str, ...]


def streams_for(views: str, k: int) -> list[QueryStream]:
    if views == "both":
        return [QueryStream("2d", k, ("2d",)), QueryStream("3d", k, ("3d",))]
    if views == "2d":
        return [QueryStream("2d", k, ("2d",))]
    if views == "3d":
        return [QueryStream("3d", k, ("3d",))]
    if views == "precombined":
        return [QueryStream("pre", 2 * k, ("2d", "3d"))]
    raise ValueError(f"unknown views setting {views!r}; expected one of {VIEW_MODES}")


class _Block(Module):
    def __init__(self, d: int, heads: int, streams: list[str], rng: Rng, dtype):
        self.self_attn = nn.MultiHeadAttention(d, heads, rng.child("self_attn"), dtype=dtype)
        branches = streams + ["text"]
        self.sa_norm = {b: LayerNorm(d, dtype) for b in branches}
        self.cross_attn = {s: nn.MultiHeadAttention(d, heads, rng.child(f"cross_{s}"), dtype=dtype) for s in streams}
        self.cross_norm = {s: LayerNorm(d, dtype) for s in streams}
        self.ffn = {b: FeedForward(d, 2 * d, rng.child(f"ffn_{b}"), dtype=dtype) for b in branches}
        self.ffn_norm = {b: LayerNorm(d, dtype) for b in branches}

    def branch_self_attention(self, branch: str) -> nn.MultiHeadAttention:
        """The self-attention module a branch uses (one object for all branches)."""
        if branch not in self.sa_norm:
            raise KeyError(branch)
        return self.self_attn


@dataclass
class MQOutput:
    queries: dict[str, Tensor]              # stream -> (B, K_s, d)
    text: Tensor | None                     # (B, T, d)
    text_mask: np.ndarray | None            # (B, T)
    attention: list[Tensor] = field(default_factory=list)  # per block (B, heads, L, L)
    segments: list[tuple[str, int, int]] = field(default_factory=list)

    @property
    def universal(self) -> Tensor:
        return concat_universal(*self.queries.values()) if len(self.queries) > 1 else next(iter(self.queries.values()))


def concat_universal(*parts: Tensor) -> Tensor:
    """Stack per-view query outputs along the token axis, 2D rows first."""
    if not parts:
        raise ValueError("concat_universal: no query sets")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.shape != ref:
            raise T.ShapeError(f"concat_universal: query shapes differ, {ref} vs {p.shape}")
    return T.concat(list(parts), axis=-2)


def split_universal(q: Tensor, n_views: int = 2) -> list[Tensor]:
    k = q.shape[-2] // n_views
    idx = (slice(None),) * (q.ndim - 2)
    return [q[idx + (slice(i * k, (i + 1) * k),)] for i in range(n_views)]


class MQFormer(Module):
    def __init__(self, vocab_size: int, d: int = 64, d_enc: int = 64, n_queries: int = 4, blocks: int = 2,
                 heads: int = 4, max_len: int = 256, views: str = "both", rng: Rng | None = None,
                 dtype=np.float32):
        rng = rng or Rng(0)
        self.d, self.d_enc, self.k = d, d_enc, n_queries
        self.views = views
        self.dtype = dtype
        self.max_len = max_len
        self.streams = streams_for(views, n_queries)
        names = [s.name for s in self.streams]
        self.queries = {s.name: Parameter(rng.child(f"query_{s.name}").normal((s.n_queries, d), 0.02, dtype))
                        for s in self.streams}
        used_views = sorted({v for s in self.streams for v in s.sources})
        self.input_proj = {v: Linear(d_enc, d, rng.child(f"proj_{v}"), dtype=dtype) for v in used_views}
        self.tok_embed = nn.Embedding(vocab_size, d, rng.child("tok"), dtype=dtype)
        self.pos_embed = nn.Embedding(max_len, d, rng.child("pos"), dtype=dtype)
        self.embed_norm = LayerNorm(d, dtype)
        self.blocks = [_Block(d, heads, names, rng.child(f"block{i}"), dtype) for i in range(blocks)]
        self.match_head = Linear(d, 1, rng.child("match"), dtype=dtype)
        self.lm_head = Linear(d, vocab_size, rng.child("lm"), dtype=dtype)

    @property
    def stream_names(self) -> list[str]:
        return [s.name for s in self.streams]

    # -- masks ------------------------------------------------------------
    def build_mask(self, mode: MaskMode, batch: int, text_mask: np.ndarray | None,
                   visible: tuple[str, ...] | None = None) -> np.ndarray:
        """Boolean (B, 1, L, L) mask, True where attention is forbidden."""
        sizes = [(s.name, s.n_queries) for s in self.streams]
        nq = sum(n for _, n in sizes)
        nt = 0 if text_mask is None else text_mask.shape[1]
        L = nq + nt
        allow = np.zeros((batch, L, L), dtype=bool)
        allow[:, :nq, :nq] = True
        if nt:
            real = text_mask.astype(bool)
            text_keys = np.broadcast_to(real[:, None, :], (batch, nt, nt))
            if mode is MaskMode.BIMODAL:
                allow[:, :nq, nq:] = real[:, None, :]
                allow[:, nq:, :nq] = True
                allow[:, nq:, nq:] = text_keys
            elif mode is MaskMode.UNIMODAL:
                allow[:, nq:, nq:] = text_keys
            elif mode is MaskMode.CAUSAL_TEXT:
                causal = np.tril(np.ones((nt, nt), dtype=bool))
                allow[:, nq:, nq:] = text_keys & causal
                offset = 0
                for name, n in sizes:
                    if visible is None or name in visible:
                        allow[:, nq:, offset:offset + n] = True
                    offset += n
            else:
                raise ValueError(f"unknown mask mode {mode}")
        return ~allow[:, None]

    # -- forward ----------------------------------------------------------
    def embed_text(self, ids: np.ndarray) -> Tensor:
        b, t = ids.shape
        if t > self.max_len:
            raise ValueError(f"text length {t} exceeds max_len {self.max_len}")
        pos = np.broadcast_to(np.arange(t), (b, t))
        return self.embed_norm(self.tok_embed(ids) + self.pos_embed(pos))

    def __call__(self, memories: dict, text_ids: np.ndarray | None = None, text_mask: np.ndarray | None = None,
                 mode: MaskMode = MaskMode.UNIMODAL, visible: tuple[str, ...] | None = None,
                 return_attention: bool = False) -> MQOutput:
        """``memories`` maps view name -> (H (B, N, d_enc) Tensor, atom_mask (B, N))."""
        batch = _batch_size(memories, self.input_proj)
        if text_ids is not None:
            if text_ids.shape[0] != batch:
                raise ValueError(f"batch size mismatch: {batch} molecules vs {text_ids.shape[0]} texts")
            if text_mask is None:
                raise ValueError("text_mask required with text_ids")
        mem, mem_mask = {}, {}
        for view, proj in self.input_proj.items():
            h, amask = memories[view]
            mem[view] = proj(h)
            mem_mask[view] = amask
        stream_mem = {}
        for s in self.streams:
            if len(s.sources) == 1:
                stream_mem[s.name] = (mem[s.sources[0]], mem_mask[s.sources[0]])
            else:
                stream_mem[s.name] = (T.concat([mem[v] for v in s.sources], axis=1),
                                      np.concatenate([mem_mask[v] for v in s.sources], axis=1))

        segs: dict[str, Tensor] = {
            s.name: Tensor(np.zeros((batch, s.n_queries, self.d), dtype=self.dtype)) + self.queries[s.name]
            for s in self.streams
        }
        if text_ids is not None:
            segs["text"] = self.embed_text(text_ids)
        order = list(segs)
        bounds, start = [], 0
        for name in order:
            n = segs[name].shape[1]
            bounds.append((name, start, start + n))
            start += n
        mask = self.build_mask(mode, batch, text_mask, visible)

        maps = []
        for blk in self.blocks:
            x = T.concat([segs[n] for n in order], axis=1)
            res = blk.self_attn(x, mask=mask, return_probs=return_attention)
            if return_attention:
                res, probs = res
                maps.append(probs)
            for name, a, b in bounds:
                segs[name] = blk.sa_norm[name](segs[name] + res[:, a:b])
            for s in self.streams:
                m, mm = stream_mem[s.name]
                cross = blk.cross_attn[s.name](segs[s.name], memory=m, mask=~mm[:, None, None, :])
                segs[s.name] = blk.cross_norm[s.name](segs[s.name] + cross)
            for name in order:
                segs[name] = blk.ffn_norm[name](segs[name] + blk.ffn[name](segs[name]))

        return MQOutput(
            queries={s.name: segs[s.name] for s in self.streams},
            text=segs.get("text"),
            text_mask=text_mask,
            attention=maps,
            segments=bounds,
        )

    def match_logits(self, out: MQOutput) -> Tensor:
        """Mean-pool all query outputs, then a linear classifier -> (B,) logits."""
        pooled = T.mean(out.universal, axis=1)
        return T.reshape(self.match_head(pooled), (pooled.shape[0],))

    def lm_logits(self, out: MQOutput) -> Tensor:
        return self.lm_head(out.text)


def _batch_size(memories, needed) -> int:
    sizes = set()
    for view in needed:
        if view not in memories:
            raise ValueError(f"missing encoder output for view {view!r}")
        h, amask = memories[view]
        if h.shape[:2] != amask.shape:
            raise ValueError(f"view {view}: H {h.shape} does not match atom mask {amask.shape}")
        sizes.add(h.shape[0])
    if len(sizes) != 1:
        raise ValueError(f"batch size mismatch across views: {sorted(sizes)}")
    return sizes.pop()


def export_attention(model: MQFormer, memories: dict, text_ids: np.ndarray, text_mask: np.ndarray,
                     sample_ids: list[str], vocab, layer: int, path, mode: MaskMode = MaskMode.BIMODAL) -> int:
    """Write one JSON line per (sample, head, query) with its self-attention row.

    Columns cover every token of the joint stream (query slots, then text);
    padding columns are dropped. Returns the number of records written.
    """
    if not 0 <= layer < len(model.blocks):
        raise IndexError(f"layer {layer} out of range for {len(model.blocks)} blocks")
    out = model(memories, text_ids, text_mask, mode=mode, return_attention=True)
    probs = out.attention[layer].data
    qvecs = {s: out.queries[s].data for s in model.stream_names}
    nq = sum(s.n_queries for s in model.streams)
    n = 0
    with open(Path(path), "w", encoding="utf-8") as fh:
        for b, sid in enumerate(sample_ids):
            real = text_mask[b].astype(bool)
            cols = list(range(nq)) + [nq + j for j in np.flatnonzero(real)]
            names = [f"[Q{s.name}:{k}]" for s in model.streams for k in range(s.n_queries)]
            names += [vocab.token(int(t)) for t in text_ids[b][real]]
            offset = 0
            for s in model.streams:
                for k in range(s.n_queries):
                    for h in range(probs.shape[1]):
                        row = probs[b, h, offset + k, cols]
                        rec = {"sample_id": sid, "layer": layer, "head": h, "query_view": s.name,
                               "query_index": k, "weights": [float(w) for w in row], "tokens": names,
                               "query_vector": [float(v) for v in qvecs[s.name][b, k]]}
                        fh.write(json.dumps(rec) + "\n")
                        n += 1
                offset += s.n_queries
    return n


def read_attention(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
