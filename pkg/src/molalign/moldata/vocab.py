"""Word-level tokenizer shared by the text branch and the caption decoder."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

PAD, UNK, DEC, CLS, SEP = "[PAD]", "[UNK]", "[DEC]", "[CLS]", "[SEP]"
SPECIALS = (PAD, UNK, DEC, CLS, SEP)
MAX_LEN = 256

_WORD = re.compile(r"\w+|[^\w\s]")


def words(text: str) -> list[str]:
    return _WORD.findall(text)


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        for s in SPECIALS:
            if self.tokens.count(s) != 1:
                raise ValueError(f"special token {s} must appear exactly once")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def dec_id(self) -> int:
        return self.index[DEC]

    @property
    def cls_id(self) -> int:
        return self.index[CLS]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]

    def encode(self, pieces: Iterable[str]) -> list[int]:
        return [self.id(p) for p in pieces]


def build_vocab(corpus: Iterable[str], extra_tokens: Iterable[str] = ()) -> Vocabulary:
    texts = list(corpus)
    if not texts:
        raise ValueError("build_vocab: corpus is empty")
    seen: dict[str, None] = {}
    for t in texts:
        for w in words(t):
            seen.setdefault(w, None)
    for w in extra_tokens:
        seen.setdefault(w, None)
    body = sorted(w for w in seen if w not in SPECIALS)
    return Vocabulary(list(SPECIALS) + body)


@dataclass
class TextSample:
    raw: str
    token_ids: np.ndarray
    pad_mask: np.ndarray

    @property
    def length(self) -> int:
        return int(self.pad_mask.sum())


def tokenize(text: str, vocab: Vocabulary, max_len: int = MAX_LEN) -> TextSample:
    """[DEC] w1 .. wn [SEP] [PAD]..., padded/truncated to ``max_len``."""
    pieces = words(text)
    if not pieces:
        raise ValueError("tokenize: empty text")
    if max_len < 3:
        raise ValueError("tokenize: max_len must leave room for [DEC], one word and [SEP]")
    body = vocab.encode(pieces)[: max_len - 2]
    ids = [vocab.dec_id] + body + [vocab.sep_id]
    n = len(ids)
    out = np.full(max_len, vocab.pad_id, dtype=np.int64)
    out[:n] = ids
    mask = np.zeros(max_len, dtype=np.int64)
    mask[:n] = 1
    return TextSample(text, out, mask)


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    specials = {vocab.index[s] for s in SPECIALS if s != UNK}
    return " ".join(vocab.token(int(i)) for i in ids if int(i) not in specials)


def collate(samples: list[TextSample]) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples and trim trailing columns that are padding for every row."""
    width = max(s.length for s in samples)
    ids = np.stack([s.token_ids[:width] for s in samples])
    mask = np.stack([s.pad_mask[:width] for s in samples])
    return ids, mask
