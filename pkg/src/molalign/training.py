"""Staged workflows: encoder pretraining, Stage 1, Stage 2 and evaluation.

Encoders are frozen during alignment, so their outputs are computed once per
dataset (``MemoryBank``) and sliced per batch.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .captionlm import CaptionDecoder, build_prefixes, caption_targets, generate_greedy, stage2_loss
from .checkpoint import Checkpoint, CheckpointError, collect, file_hash, load_into
from .config import Config
from .encoders import Encoder2D, Encoder3D, MolBatch, pretrain_toy
from .evalmetrics import caption_scores, query_diversity, retrieval_eval, score_tables
from .moldata import (DatasetRecord, Vocabulary, build_vocab, collate, detokenize, smiles_tokens, tokenize,
                      words)
from .mqformer import MaskMode, MQFormer, export_attention, read_attention
from .numerics import AdamW, Module, Rng, Tensor, WarmupDecay, deterministic, no_grad
from .objectives import stage1_loss

log = logging.getLogger(__name__)

VIEWS_NEEDED = {"both": ("2d", "3d"), "2d": ("2d",), "3d": ("3d",), "precombined": ("2d", "3d")}


# ---------------------------------------------------------------- logging

class RunLog:
    """Line-delimited JSON log; opening it appends a reproducibility header."""

    def __init__(self, path: str | Path | None, command: str, cfg: Config, dataset: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        header = {"type": "header", "command": command, "version": __version__, "config_hash": cfg.hash(),
                  "seed": cfg.seed, "dataset_hash": file_hash(dataset) if dataset else None}
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
        self.write(header)

    def write(self, rec: dict) -> None:
        self.records.append(rec)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------- data

@dataclass
class Corpus:
    records: list[DatasetRecord]
    vocab: Vocabulary
    text_ids: np.ndarray
    text_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.records)

    def texts(self, idx) -> tuple[np.ndarray, np.ndarray]:
        ids, mask = self.text_ids[idx], self.text_mask[idx]
        width = int(mask.sum(axis=1).max())
        return ids[:, :width], mask[:, :width]


def corpus_vocab(records: list[DatasetRecord], prompt: str) -> Vocabulary:
    extra = words(prompt) + sorted({t for r in records for t in smiles_tokens(r.molecule.smiles)})
    return build_vocab([r.text for r in records], extra)


def make_corpus(records: list[DatasetRecord], vocab: Vocabulary, max_len: int) -> Corpus:
    if not records:
        raise ValueError("dataset is empty")
    samples = [tokenize(r.text, vocab, max_len=max_len) for r in records]
    ids = np.stack([s.token_ids for s in samples])
    mask = np.stack([s.pad_mask for s in samples])
    width = int(mask.sum(axis=1).max())
    return Corpus(records, vocab, ids[:, :width], mask[:, :width])


class MemoryBank:
    """Frozen encoder outputs for every record, padded per batch on demand."""

    def __init__(self, encoders: dict[str, Module], records: list[DatasetRecord], views: tuple[str, ...],
                 chunk: int = 64):
        self.views = views
        self.H: dict[str, list[np.ndarray]] = {v: [] for v in views}
        mols = [r.molecule for r in records]
        with no_grad():
            for s in range(0, len(mols), chunk):
                batch = MolBatch.from_molecules(mols[s:s + chunk], need_coords="3d" in views)
                for v in views:
                    out = encoders[v](batch)
                    for i in range(batch.size):
                        self.H[v].append(out.per_molecule(i))

    def batch(self, idx) -> dict:
        idx = np.asarray(idx)
        out = {}
        for v in self.views:
            hs = [self.H[v][i] for i in idx]
            n = max(h.shape[0] for h in hs)
            H = np.zeros((len(hs), n, hs[0].shape[1]), dtype=hs[0].dtype)
            mask = np.zeros((len(hs), n), dtype=bool)
            for b, h in enumerate(hs):
                H[b, :len(h)] = h
                mask[b, :len(h)] = True
            out[v] = (Tensor(H), mask)
        return out


# ---------------------------------------------------------------- models

def build_encoders(cfg: Config) -> dict[str, Module]:
    root = Rng(cfg.seed).child("encoders")
    return {
        "2d": Encoder2D(cfg.d_enc, cfg.enc_layers, cfg.heads, root.child("2d"), cfg.dtype),
        "3d": Encoder3D(cfg.d_enc, cfg.enc_layers, cfg.heads, root.child("3d"), cfg.dtype),
    }


def build_mqformer(cfg: Config, vocab_size: int) -> MQFormer:
    return MQFormer(vocab_size, d=cfg.d, d_enc=cfg.d_enc, n_queries=cfg.n_queries, blocks=cfg.blocks,
                    heads=cfg.heads, max_len=cfg.max_text_len, views=cfg.views,
                    rng=Rng(cfg.seed).child("mqformer"), dtype=cfg.dtype)


def build_decoder(cfg: Config, vocab_size: int, with_lora: bool = True) -> CaptionDecoder:
    dec = CaptionDecoder(vocab_size, d_query=cfg.d, d_dec=cfg.d_dec, blocks=cfg.dec_blocks, heads=cfg.dec_heads,
                         max_seq=cfg.max_seq, rng=Rng(cfg.seed).child("decoder"), dtype=cfg.dtype)
    if with_lora:
        dec.add_lora(cfg.lora_r, cfg.lora_alpha, cfg.lora_dropout, rng=Rng(cfg.seed).child("lora"))
    return dec


def encoder_arrays(encoders: dict[str, Module]) -> dict[str, np.ndarray]:
    return collect({"encoder2d": encoders["2d"], "encoder3d": encoders["3d"]})


def load_encoders(cfg: Config, arrays: dict[str, np.ndarray]) -> dict[str, Module]:
    enc = build_encoders(cfg)
    load_into(enc["2d"], arrays, "encoder2d")
    load_into(enc["3d"], arrays, "encoder3d")
    for e in enc.values():
        e.freeze()
    return enc


def _batches(n: int, size: int, rng: Rng) -> list[np.ndarray]:
    perm = rng.permutation(n)
    out = [perm[s:s + size] for s in range(0, n, size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


# ---------------------------------------------------------------- stages

def pretrain_encoders(cfg: Config, records: list[DatasetRecord], runlog: RunLog | None = None) -> tuple[dict, dict]:
    enc = build_encoders(cfg)
    mols = [r.molecule for r in records]
    reports = {}
    for view, e in enc.items():
        reports[view] = pretrain_toy(e, mols, steps=cfg.pretrain_steps, seed=cfg.seed)
        if runlog:
            runlog.write({"type": "pretrain", "view": view, **reports[view]})
    return enc, reports


@dataclass
class Stage1Result:
    model: MQFormer
    encoders: dict[str, Module]
    corpus: Corpus
    bank: MemoryBank
    steps: int


def train_stage1(cfg: Config, records: list[DatasetRecord], encoders: dict[str, Module] | None = None,
                 runlog: RunLog | None = None, vocab: Vocabulary | None = None) -> Stage1Result:
    cfg.validate()
    if len(records) < 2:
        raise ValueError("Stage 1 needs at least two records")
    encoders = encoders or build_encoders(cfg)
    for e in encoders.values():
        e.freeze()
    vocab = vocab or corpus_vocab(records, cfg.prompt)
    corpus = make_corpus(records, vocab, cfg.max_text_len)
    bank = MemoryBank(encoders, records, VIEWS_NEEDED[cfg.views])
    model = build_mqformer(cfg, len(vocab))
    opt = AdamW(model.named_parameters(), schedule=WarmupDecay(cfg.lr, cfg.warmup, cfg.decay),
                weight_decay=cfg.weight_decay)
    rng = Rng(cfg.seed).child("stage1")
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _batches(len(corpus), cfg.batch_size, rng.child(f"epoch{epoch}")):
            if cfg.max_steps and step >= cfg.max_steps:
                break
            ids, mask = corpus.texts(idx)
            opt.zero_grad()
            rep = stage1_loss(model, bank.batch(idx), ids, mask, rng.child(f"step{step}"),
                              tau=cfg.tau, alpha=cfg.alpha, contrastive=cfg.contrastive)
            rep.total_tensor.backward()
            lr = opt.step()
            step += 1
            if runlog:
                runlog.write({"type": "step", "stage": 1, "step": step, "epoch": epoch, "lr": lr,
                              "mtc": rep.mtc, "mtm": rep.mtm, "mcap": rep.mcap, "total": rep.total,
                              "alpha": rep.alpha, "tau": rep.tau})
        opt.end_epoch()
        if cfg.max_steps and step >= cfg.max_steps:
            break
    return Stage1Result(model, encoders, corpus, bank, step)


def stage1_checkpoint(cfg: Config, res: Stage1Result, dataset_hash: str | None) -> Checkpoint:
    arrays = encoder_arrays(res.encoders)
    arrays.update(collect({"mqformer": res.model}))
    meta = {"stage": 1, "steps": res.steps, "dataset_hash": dataset_hash, "config_hash": cfg.hash()}
    return Checkpoint(arrays, cfg.snapshot(), list(res.corpus.vocab.tokens), meta)


def restore_stage1(cfg: Config, ckpt: Checkpoint) -> tuple[dict, MQFormer, Vocabulary]:
    if ckpt.meta.get("stage") not in (1, 2):
        raise CheckpointError("not a Stage-1 or Stage-2 checkpoint")
    vocab = Vocabulary(list(ckpt.vocab))
    encoders = load_encoders(cfg, ckpt.arrays)
    model = build_mqformer(cfg, len(vocab))
    load_into(model, ckpt.arrays, "mqformer")
    return encoders, model, vocab


@dataclass
class Stage2Result:
    model: MQFormer
    decoder: CaptionDecoder
    encoders: dict[str, Module]
    corpus: Corpus
    bank: MemoryBank
    steps: int


def stage2_trainable(model: MQFormer, decoder: CaptionDecoder) -> list[tuple[str, Tensor]]:
    return ([(f"mqformer.{n}", p) for n, p in model.named_parameters()]
            + [(f"decoder.{n}", p) for n, p in decoder.lora_parameters()])


def train_stage2(cfg: Config, records: list[DatasetRecord], encoders: dict[str, Module], model: MQFormer,
                 vocab: Vocabulary, runlog: RunLog | None = None) -> Stage2Result:
    cfg.validate()
    corpus = make_corpus(records, vocab, cfg.max_text_len)
    bank = MemoryBank(encoders, records, VIEWS_NEEDED[cfg.views])
    decoder = build_decoder(cfg, len(vocab))
    prefixes = build_prefixes(vocab, [r.molecule.smiles for r in records], cfg.prompt, cfg.prompt_order)
    captions = caption_targets(corpus.text_ids, corpus.text_mask)
    params = stage2_trainable(model, decoder)
    # text-branch parameters of the MQ-Former get no gradient from a query-only forward
    opt = AdamW(params, schedule=WarmupDecay(cfg.stage2_lr, cfg.warmup, cfg.decay),
                weight_decay=cfg.weight_decay, allow_missing=True)
    if runlog:
        n_lora = sum(p.data.size for _, p in decoder.lora_parameters())
        runlog.write({"type": "lora", "lora_params": n_lora, "formula": decoder.lora_formula_count(),
                      "decoder_params": decoder.num_parameters(),
                      "trainable_fraction": n_lora / decoder.num_parameters()})
    rng = Rng(cfg.seed).child("stage2")
    step = 0
    for epoch in range(cfg.stage2_epochs):
        for idx in _batches(len(corpus), cfg.stage2_batch_size, rng.child(f"epoch{epoch}")):
            if cfg.stage2_max_steps and step >= cfg.stage2_max_steps:
                break
            opt.zero_grad()
            q = model(bank.batch(idx)).universal
            loss = stage2_loss(decoder, q, [prefixes[i] for i in idx], [captions[i] for i in idx])
            loss.backward()
            lr = opt.step()
            step += 1
            if runlog:
                runlog.write({"type": "step", "stage": 2, "step": step, "epoch": epoch, "lr": lr,
                              "stage2_loss": float(loss.data)})
        opt.end_epoch()
        if cfg.stage2_max_steps and step >= cfg.stage2_max_steps:
            break
    return Stage2Result(model, decoder, encoders, corpus, bank, step)


def stage2_checkpoint(cfg: Config, res: Stage2Result, dataset_hash: str | None) -> Checkpoint:
    arrays = encoder_arrays(res.encoders)
    arrays.update(collect({"mqformer": res.model, "decoder": res.decoder}))
    meta = {"stage": 2, "steps": res.steps, "dataset_hash": dataset_hash, "config_hash": cfg.hash()}
    return Checkpoint(arrays, cfg.snapshot(), list(res.corpus.vocab.tokens), meta)


def restore_decoder(cfg: Config, ckpt: Checkpoint, vocab_size: int) -> CaptionDecoder:
    if ckpt.meta.get("stage") != 2:
        raise CheckpointError("caption evaluation needs a Stage-2 checkpoint")
    dec = build_decoder(cfg, vocab_size)
    load_into(dec, ckpt.arrays, "decoder")
    return dec


# ---------------------------------------------------------------- evaluation

def query_text_features(model: MQFormer, bank: MemoryBank, corpus: Corpus, batch: int = 64):
    """UNIMODAL universal queries (N, nq, d) and text features (N, T, d) for every record."""
    qs, xs = [], []
    n = len(corpus)
    with no_grad(), deterministic():
        for s in range(0, n, batch):
            idx = np.arange(s, min(s + batch, n))
            ids, mask = corpus.text_ids[idx], corpus.text_mask[idx]
            out = model(bank.batch(idx), ids, mask, mode=MaskMode.UNIMODAL)
            qs.append(out.universal.data)
            xs.append(out.text.data)
    return np.concatenate(qs), np.concatenate(xs)


def evaluate_retrieval(model: MQFormer, bank: MemoryBank, corpus: Corpus, kind: str = "multi",
                       batch_size: int = 64) -> dict:
    q, x = query_text_features(model, bank, corpus, batch_size)
    S, Sp = score_tables(q, x, corpus.text_mask, kind=kind, tile=batch_size)
    return {"in_batch": retrieval_eval(S, Sp, mode="in-batch", batch_size=batch_size).as_dict(),
            "full_set": retrieval_eval(S, Sp, mode="full-set").as_dict()}


def counterfactual_preference(model: MQFormer, bank: MemoryBank, corpus: Corpus, edit, kind: str = "multi") -> float:
    """Fraction of records whose own caption outscores ``edit(caption)`` against the same molecule.

    Probes whether a specific caption fact is grounded in the molecule: 0.5 is chance.
    """
    edited = make_corpus([DatasetRecord(r.id, r.molecule, edit(r.text)) for r in corpus.records], corpus.vocab,
                         corpus.text_ids.shape[1])
    q, x = query_text_features(model, bank, corpus)
    _, xe = query_text_features(model, bank, edited)
    own = np.diag(score_tables(q, x, corpus.text_mask, kind)[0])
    alt = np.diag(score_tables(q, xe, edited.text_mask, kind)[0])
    return float((own > alt).mean())


def generate_captions(cfg: Config, model: MQFormer, decoder: CaptionDecoder, bank: MemoryBank,
                      corpus: Corpus) -> list[str]:
    prefixes = build_prefixes(corpus.vocab, [r.molecule.smiles for r in corpus.records], cfg.prompt,
                              cfg.prompt_order)
    preds = []
    with no_grad(), deterministic():
        for s in range(0, len(corpus), cfg.eval_batch):
            idx = np.arange(s, min(s + cfg.eval_batch, len(corpus)))
            q = model(bank.batch(idx)).universal
            gen = generate_greedy(decoder, q, [prefixes[i] for i in idx], cfg.max_new, corpus.vocab.sep_id)
            preds.extend(detokenize(g, corpus.vocab) for g in gen)
    return preds


def evaluate_captions(cfg: Config, model, decoder, bank, corpus, out_path: Path | None = None) -> dict:
    preds = generate_captions(cfg, model, decoder, bank, corpus)
    refs = [r.text for r in corpus.records]
    if out_path:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w", encoding="utf-8") as fh:
            for r, p in zip(corpus.records, preds):
                fh.write(json.dumps({"id": r.id, "prediction": p, "reference": r.text}) + "\n")
    return caption_scores(preds, refs).as_dict()


def evaluate_diversity(model: MQFormer, bank: MemoryBank, corpus: Corpus, attn_path: Path | None = None,
                       layer: int = -1, limit: int = 16) -> dict:
    q, _ = query_text_features(model, bank, corpus)
    recs = None
    if attn_path is not None and model.blocks:
        recs = dump_attention(model, bank, corpus, attn_path, layer, limit)
    out = query_diversity(q, recs)
    out.pop("attention_entropy", None)
    return out


def dump_attention(model: MQFormer, bank: MemoryBank, corpus: Corpus, path: Path, layer: int = -1,
                   limit: int = 16) -> list[dict]:
    layer = layer % len(model.blocks) if layer < 0 else layer
    idx = np.arange(min(limit, len(corpus)))
    ids, mask = corpus.texts(idx)
    with no_grad(), deterministic():
        export_attention(model, bank.batch(idx), ids, mask, [corpus.records[i].id for i in idx], corpus.vocab,
                         layer, path)
    return read_attention(path)
