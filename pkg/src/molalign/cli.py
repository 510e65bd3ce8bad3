"""Command-line entry point.

Exit codes: 0 success, 1 validation failure (bad config, data, checkpoint
contents, or a failed gradient gate), 2 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, file_hash, load_checkpoint, save_checkpoint
from .config import Config, ConfigError, load_config
from .moldata import DatasetError, gen_synthetic, load_dataset, save_dataset, shuffle_coords
from .training import (VIEWS_NEEDED, MemoryBank, RunLog, dump_attention, encoder_arrays, evaluate_captions,
                       evaluate_diversity, evaluate_retrieval, load_encoders, make_corpus, pretrain_encoders,
                       restore_decoder, restore_stage1, stage1_checkpoint, stage2_checkpoint, train_stage1,
                       train_stage2)

log = logging.getLogger("molalign")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
TASKS = ("retrieval", "caption", "attn", "diversity")


class UsageError(ValueError):
    pass


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    for f in fields(Config):
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", default=None,
                       help=argparse.SUPPRESS)


def _config(args) -> Config:
    over = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = v.strip()
    for f in fields(Config):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            over[f.name] = v
    return load_config(args.config, over)


def _records(path: str, need_coords: bool):
    if not path:
        raise ConfigError("no dataset given (set dataset = <path> or --dataset)")
    records = load_dataset(path)
    if need_coords:
        missing = [r.id for r in records if r.molecule.coords is None]
        if missing:
            raise DatasetError(f"{path}: records without coordinates: {missing[:5]}")
    return records


def _out(cfg: Config) -> Path:
    p = Path(cfg.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------- commands

def cmd_gen_synthetic(args) -> int:
    records = gen_synthetic(args.n, args.seed)
    if args.shuffle_coords:
        records = shuffle_coords(records, args.seed + 1)
    save_dataset(records, args.out)
    _print({"written": len(records), "path": str(args.out), "dataset_hash": file_hash(args.out)})
    return EXIT_OK


def cmd_pretrain_encoders(args) -> int:
    cfg = _config(args)
    records = _records(cfg.dataset, need_coords=True)
    out = _out(cfg)
    runlog = RunLog(out / "pretrain.log.jsonl", "pretrain-encoders", cfg, cfg.dataset)
    enc, reports = pretrain_encoders(cfg, records, runlog)
    ckpt = Checkpoint(encoder_arrays(enc), cfg.snapshot(), [], {"stage": 0, "config_hash": cfg.hash()})
    digest = save_checkpoint(out / "encoders.ckpt", ckpt)
    _print({"checkpoint": str(out / "encoders.ckpt"), "content_hash": digest, "reports": reports})
    return EXIT_OK


def cmd_train_stage1(args) -> int:
    cfg = _config(args)
    records = _records(cfg.dataset, need_coords="3d" in VIEWS_NEEDED[cfg.views])
    out = _out(cfg)
    encoders = None
    if cfg.encoder_ckpt:
        encoders = load_encoders(cfg, load_checkpoint(cfg.encoder_ckpt).arrays)
    runlog = RunLog(out / "stage1.log.jsonl", "train-stage1", cfg, cfg.dataset)
    t0 = time.time()
    res = train_stage1(cfg, records, encoders, runlog)
    digest = save_checkpoint(out / "stage1.ckpt", stage1_checkpoint(cfg, res, file_hash(cfg.dataset)))
    _print({"checkpoint": str(out / "stage1.ckpt"), "content_hash": digest, "steps": res.steps,
            "seconds": round(time.time() - t0, 1)})
    return EXIT_OK


def cmd_train_stage2(args) -> int:
    cfg = _config(args)
    ckpt = load_checkpoint(args.ckpt)
    records = _records(cfg.dataset, need_coords="3d" in VIEWS_NEEDED[cfg.views])
    out = _out(cfg)
    encoders, model, vocab = restore_stage1(cfg, ckpt)
    runlog = RunLog(out / "stage2.log.jsonl", "train-stage2", cfg, cfg.dataset)
    res = train_stage2(cfg, records, encoders, model, vocab, runlog)
    digest = save_checkpoint(out / "stage2.ckpt", stage2_checkpoint(cfg, res, file_hash(cfg.dataset)))
    _print({"checkpoint": str(out / "stage2.ckpt"), "content_hash": digest, "steps": res.steps})
    return EXIT_OK


def _eval_setup(cfg: Config, ckpt_path: str):
    ckpt = load_checkpoint(ckpt_path)
    encoders, model, vocab = restore_stage1(cfg, ckpt)
    path = cfg.eval_dataset or cfg.dataset
    records = _records(path, need_coords="3d" in VIEWS_NEEDED[cfg.views])
    corpus = make_corpus(records, vocab, cfg.max_text_len)
    bank = MemoryBank(encoders, records, VIEWS_NEEDED[cfg.views])
    return ckpt, model, corpus, bank


def cmd_eval(args) -> int:
    cfg = _config(args)
    if args.task not in TASKS:
        raise UsageError(f"unknown task {args.task!r}; choose from {', '.join(TASKS)}")
    ckpt, model, corpus, bank = _eval_setup(cfg, args.ckpt)
    out = _out(cfg)
    RunLog(out / "eval.log.jsonl", f"eval:{args.task}", cfg, cfg.eval_dataset or cfg.dataset)
    report = {"config_hash": ckpt.meta.get("config_hash"), "checkpoint_hash": ckpt.content_hash}
    if args.task == "retrieval":
        report["retrieval"] = evaluate_retrieval(model, bank, corpus, cfg.contrastive, cfg.eval_batch)
    elif args.task == "caption":
        dec = restore_decoder(cfg, ckpt, len(corpus.vocab))
        report["caption"] = evaluate_captions(cfg, model, dec, bank, corpus, out / "captions.jsonl")
    elif args.task == "attn":
        recs = dump_attention(model, bank, corpus, out / "attention.jsonl", args.layer, args.limit)
        report["attn"] = {"path": str(out / "attention.jsonl"), "records": len(recs)}
    else:
        report["diversity"] = evaluate_diversity(model, bank, corpus, out / "attention.jsonl", args.layer,
                                                 args.limit)
    (out / f"metrics_{args.task}.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    _print(report)
    return EXIT_OK


def cmd_attn_dump(args) -> int:
    cfg = _config(args)
    _, model, corpus, bank = _eval_setup(cfg, args.ckpt)
    path = Path(args.out) if args.out else _out(cfg) / "attention.jsonl"
    recs = dump_attention(model, bank, corpus, path, args.layer, args.limit)
    _print({"path": str(path), "records": len(recs)})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite
    report = run_suite(n_batches=args.batches, seed=args.seed)
    _print(report)
    return EXIT_OK if report["passed"] else EXIT_INVALID


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="molalign", description="Multi-view molecule-text alignment toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="write a synthetic planted-signal dataset (JSONL)")
    g.add_argument("--n", type=int, default=256)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--shuffle-coords", action="store_true", help="break the coordinate signal")
    g.set_defaults(fn=cmd_gen_synthetic)

    for name, fn, help_ in (("pretrain-encoders", cmd_pretrain_encoders, "toy masked-atom encoder pretraining"),
                            ("train-stage1", cmd_train_stage1, "align queries to text (MTC + MTM + MCap)")):
        s = sub.add_parser(name, help=help_)
        _add_config_flags(s)
        s.set_defaults(fn=fn)

    s = sub.add_parser("train-stage2", help="LoRA captioning on top of a Stage-1 checkpoint")
    _add_config_flags(s)
    s.add_argument("--ckpt", required=True, help="Stage-1 checkpoint")
    s.set_defaults(fn=cmd_train_stage2)

    e = sub.add_parser("eval", help="retrieval / caption / attn / diversity evaluation")
    _add_config_flags(e)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--task", required=True)
    e.add_argument("--layer", type=int, default=-1)
    e.add_argument("--limit", type=int, default=16, help="samples exported for attention tasks")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("attn-dump", help="export per-query attention rows as JSONL")
    _add_config_flags(a)
    a.add_argument("--ckpt", required=True)
    a.add_argument("--out")
    a.add_argument("--layer", type=int, default=-1)
    a.add_argument("--limit", type=int, default=16)
    a.set_defaults(fn=cmd_attn_dump)

    c = sub.add_parser("gradcheck", help="64-bit finite-difference check of every loss term")
    c.add_argument("--batches", type=int, default=10)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    np.seterr(over="ignore", under="ignore")
    try:
        return args.fn(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, DatasetError, CheckpointError, UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
