"""Stage-2 captioning: a small causal decoder soft-prompted by universal queries.

The decoder input is [projected query rows] + [instruction prompt] + [SMILES
tokens] + [caption tokens]; the loss covers caption positions only. Base
weights stay frozen and low-rank adapters on the attention and feed-forward
projections carry the fine-tuning.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .moldata import Vocabulary, smiles_tokens, words
from .numerics import Module, Parameter, Rng, Tensor, is_deterministic, no_grad
from .numerics import nn
from .numerics import tensor as T

DEFAULT_PROMPT = "Describe the molecule:"
MAX_SEQ = 320


class LoRALinear(Module):
    """y = x W + b + (alpha / r) * dropout(x) A^T B^T, with A (r x d_in) and B (d_out x r)."""

    def __init__(self, base: nn.Linear, r: int = 8, alpha: float = 32.0, dropout: float = 0.1,
                 rng: Rng | None = None, dtype=np.float32):
        if r < 1 or r >= min(base.d_in, base.d_out):
            raise ValueError(f"LoRA rank {r} must satisfy 1 <= r < min(d_in={base.d_in}, d_out={base.d_out})")
        rng = rng or Rng(0)
        self.base = base
        self.A = Parameter(rng.normal((r, base.d_in), 0.02, dtype))
        self.B = Parameter(np.zeros((base.d_out, r), dtype))
        self.r, self.alpha, self.p = r, alpha, dropout
        self.scaling = alpha / r
        self._rng = rng.child("dropout")
        self._calls = 0
        self.d_in, self.d_out = base.d_in, base.d_out

    def adapter_parameters(self) -> list[Parameter]:
        return [self.A, self.B]

    def __call__(self, x: Tensor) -> Tensor:
        y = self.base(x)
        h = x
        if self.p > 0 and not is_deterministic():
            self._calls += 1
            h = T.dropout(x, self.p, self._rng.child(str(self._calls)))
        low = (h @ T.transpose(self.A)) @ T.transpose(self.B)
        return y + T.scale(low, self.scaling)


class _GatedFFN(Module):
    def __init__(self, d: int, hidden: int, rng: Rng, dtype):
        self.gate = nn.Linear(d, hidden, rng.child("gate"), dtype=dtype)
        self.up = nn.Linear(d, hidden, rng.child("up"), dtype=dtype)
        self.down = nn.Linear(hidden, d, rng.child("down"), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(T.gelu(self.gate(x)) * self.up(x))


class _DecoderBlock(Module):
    def __init__(self, d: int, heads: int, rng: Rng, dtype):
        self.attn_norm = nn.LayerNorm(d, dtype)
        self.attn = nn.MultiHeadAttention(d, heads, rng.child("attn"), dtype)
        self.ffn_norm = nn.LayerNorm(d, dtype)
        self.ffn = _GatedFFN(d, 2 * d, rng.child("ffn"), dtype)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        x = x + self.attn(self.attn_norm(x), mask=mask)
        return x + self.ffn(self.ffn_norm(x))


LORA_TARGETS = ("q", "k", "v", "o", "gate", "up", "down")


@dataclass
class DecoderInput:
    embeds: Tensor              # (B, L, d_dec)
    token_ids: np.ndarray       # (B, L) with -1 on soft-prompt rows
    target_mask: np.ndarray     # (B, L) True where position t is predicted from t - 1
    lengths: np.ndarray         # (B,)


def causal_mask(n: int) -> np.ndarray:
    """True above the diagonal: position t may attend to positions <= t."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


class CaptionDecoder(Module):
    """Pre-norm causal transformer LM with a soft-prompt projection from query space.

    The residual stream reaches the output head without a final norm, and the
    head starts small (std 0.02). The frozen base therefore begins near the
    uniform distribution, and the adapters on the o/down projections can still
    grow the residual stream far enough for confident predictions. A frozen
    final LayerNorm would cap every logit gap at roughly sqrt(d_dec).
    """

    def __init__(self, vocab_size: int, d_query: int = 64, d_dec: int = 64, blocks: int = 2, heads: int = 4,
                 max_seq: int = MAX_SEQ, rng: Rng | None = None, dtype=np.float32):
        rng = rng or Rng(0)
        for name, v in (("vocab_size", vocab_size), ("d_dec", d_dec), ("blocks", blocks), ("max_seq", max_seq)):
            if v <= 0:
                raise ValueError(f"{name} must be positive, got {v}")
        self.vocab_size, self.d_dec, self.max_seq, self.dtype = vocab_size, d_dec, max_seq, dtype
        self.tok_embed = nn.Embedding(vocab_size, d_dec, rng.child("tok"), dtype)
        self.pos_embed = nn.Embedding(max_seq, d_dec, rng.child("pos"), dtype)
        self.soft_prompt = nn.Linear(d_query, d_dec, rng.child("soft"), dtype=dtype)
        self.blocks = [_DecoderBlock(d_dec, heads, rng.child(f"block{i}"), dtype) for i in range(blocks)]
        self.lm_head = nn.Linear(d_dec, vocab_size, rng.child("head"), dtype=dtype, std=0.02)
        self.adapters: dict[str, LoRALinear] = {}

    # -- adapters
    def add_lora(self, r: int = 8, alpha: float = 32.0, dropout: float = 0.1, rng: Rng | None = None) -> None:
        """Freeze the base weights and wrap every target projection with an adapter."""
        if self.adapters:
            raise RuntimeError("LoRA adapters already attached")
        rng = rng or Rng(0)
        self.freeze()
        for i, blk in enumerate(self.blocks):
            for owner in (blk.attn, blk.ffn):
                for name in LORA_TARGETS:
                    base = getattr(owner, name, None)
                    if base is None:
                        continue
                    key = f"blocks.{i}.{name}"
                    ad = LoRALinear(base, r, alpha, dropout, rng.child(key), self.dtype)
                    setattr(owner, name, ad)
                    self.adapters[key] = ad

    def lora_parameters(self) -> list[tuple[str, Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if n.endswith(".A") or n.endswith(".B")]

    def lora_formula_count(self) -> int:
        return sum(ad.r * (ad.d_in + ad.d_out) for ad in self.adapters.values())

    # -- input assembly
    def prompt_ids(self, vocab: Vocabulary, prompt: str = DEFAULT_PROMPT) -> list[int]:
        return vocab.encode(words(prompt))

    def assemble_input(self, queries: Tensor, prefix_ids: list[list[int]],
                       caption_ids: list[list[int]] | None = None) -> DecoderInput:
        """Build the embedded sequence; ``prefix_ids`` holds prompt+SMILES ids already ordered.

        Rows are right-padded; padded positions are never targets and, being
        after every real token, never influence real positions under the causal mask.
        """
        b, nq, _ = queries.shape
        if len(prefix_ids) != b:
            raise ValueError(f"{len(prefix_ids)} prefixes for {b} query sets")
        caption_ids = caption_ids if caption_ids is not None else [[] for _ in range(b)]
        seqs = [list(p) + list(c) for p, c in zip(prefix_ids, caption_ids)]
        lengths = np.array([nq + len(s) for s in seqs])
        width = int(lengths.max())
        if width > self.max_seq:
            raise ValueError(f"decoder input length {width} exceeds max_seq {self.max_seq}")
        tok = np.zeros((b, width - nq), dtype=np.int64)
        target = np.zeros((b, width), dtype=bool)
        ids = np.full((b, width), -1, dtype=np.int64)
        for i, (p, s) in enumerate(zip(prefix_ids, seqs)):
            tok[i, :len(s)] = s
            ids[i, nq:nq + len(s)] = s
            target[i, nq + len(p):nq + len(s)] = True
        soft = self.soft_prompt(queries)
        words_e = self.tok_embed(tok)
        x = T.concat([soft, words_e], axis=1) + T.embedding(self.pos_embed.table, np.arange(width))
        return DecoderInput(x, ids, target, lengths)

    def logits(self, embeds: Tensor) -> Tensor:
        mask = causal_mask(embeds.shape[1])
        h = embeds
        for blk in self.blocks:
            h = blk(h, mask)
        return self.lm_head(h)


def build_prefixes(vocab: Vocabulary, smiles: list[str], prompt: str = DEFAULT_PROMPT,
                   order: str = "prompt-smiles") -> list[list[int]]:
    if order not in ("prompt-smiles", "smiles-prompt"):
        raise ValueError(f"unknown prompt order {order!r}")
    p = vocab.encode(words(prompt))
    out = []
    for s in smiles:
        sm = vocab.encode(smiles_tokens(s))
        out.append(p + sm if order == "prompt-smiles" else sm + p)
    return out


def caption_targets(text_ids: np.ndarray, text_mask: np.ndarray) -> list[list[int]]:
    """Stage-1 token rows ([DEC] words [SEP]) to caption segments (words [SEP])."""
    return [list(row[1:int(m.sum())]) for row, m in zip(text_ids, text_mask)]


def stage2_loss(decoder: CaptionDecoder, queries: Tensor, prefix_ids: list[list[int]],
                caption_ids: list[list[int]]) -> Tensor:
    """Mean token-level cross-entropy over caption positions."""
    inp = decoder.assemble_input(queries, prefix_ids, caption_ids)
    logits = decoder.logits(inp.embeds)
    # logits at t-1 predict the token at t
    tgt = inp.target_mask[:, 1:]
    if not tgt.any():
        raise ValueError("stage2_loss: no caption target positions")
    targets = np.where(tgt, inp.token_ids[:, 1:], 0)
    return T.cross_entropy(logits[:, :-1], targets, mask=tgt.astype(np.float64))


def generate_greedy(decoder: CaptionDecoder, queries: Tensor, prefix_ids: list[list[int]], max_new: int,
                    sep_id: int) -> list[list[int]]:
    """Argmax decoding, one token at a time, until [SEP] or ``max_new`` tokens."""
    if max_new < 0:
        raise ValueError("max_new must be non-negative")
    out: list[list[int]] = [[] for _ in prefix_ids]
    done = np.zeros(len(prefix_ids), dtype=bool)
    with no_grad():
        soft = queries if isinstance(queries, Tensor) else Tensor(queries)
        for _ in range(max_new):
            if done.all():
                break
            inp = decoder.assemble_input(soft, prefix_ids, out)
            logits = decoder.logits(inp.embeds).data
            last = inp.lengths - 1
            nxt = logits[np.arange(len(out)), last].argmax(axis=-1)
            for i, tok in enumerate(nxt):
                if done[i]:
                    continue
                if int(tok) == sep_id:
                    done[i] = True
                else:
                    out[i].append(int(tok))
    return out


def lora_trainable_fraction(decoder: CaptionDecoder) -> float:
    total = decoder.num_parameters()
    return sum(p.data.size for _, p in decoder.lora_parameters()) / total if total else 0.0


__all__ = [
    "DEFAULT_PROMPT", "MAX_SEQ", "LoRALinear", "CaptionDecoder", "DecoderInput", "LORA_TARGETS",
    "causal_mask", "build_prefixes", "caption_targets", "stage2_loss", "generate_greedy",
    "lora_trainable_fraction",
]
