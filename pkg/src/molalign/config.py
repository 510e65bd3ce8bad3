"""Run configuration: a flat ``key = value`` text file.

Lines starting with ``#`` are comments. Only ``MOLALIGN_SEED`` and
``MOLALIGN_OUT_DIR`` may override values from the environment.

Keys
----
seed, out_dir, dataset, eval_dataset, encoder_ckpt
d, d_enc, d_dec, n_queries, blocks, heads, enc_layers, dec_blocks, dec_heads
max_text_len, max_seq, tau, alpha, views, contrastive, precision
batch_size, epochs, max_steps, lr, warmup, decay, weight_decay
pretrain_steps, stage2_batch_size, stage2_epochs, stage2_max_steps, stage2_lr
lora_r, lora_alpha, lora_dropout, prompt, prompt_order, max_new, eval_batch
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

ENV_OVERRIDES = {"MOLALIGN_SEED": "seed", "MOLALIGN_OUT_DIR": "out_dir"}
# file locations, not part of the experiment's identity; checkpoints and logs
# identify their inputs by content hash instead
UNHASHED = ("out_dir", "dataset", "eval_dataset", "encoder_ckpt")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    seed: int = 0
    out_dir: str = "runs"
    dataset: str = ""
    eval_dataset: str = ""
    encoder_ckpt: str = ""

    d: int = 64
    d_enc: int = 64
    d_dec: int = 64
    n_queries: int = 4
    blocks: int = 2
    heads: int = 4
    enc_layers: int = 2
    dec_blocks: int = 2
    dec_heads: int = 4
    max_text_len: int = 256
    max_seq: int = 320

    tau: float = 0.1
    alpha: float = 2.0
    views: str = "both"
    contrastive: str = "multi"
    precision: str = "float32"

    batch_size: int = 8
    epochs: int = 2
    max_steps: int = 0
    lr: float = 1e-3
    warmup: int = 200
    decay: float = 0.9
    weight_decay: float = 0.0

    pretrain_steps: int = 200
    stage2_batch_size: int = 8
    stage2_epochs: int = 2
    stage2_max_steps: int = 0
    stage2_lr: float = 3e-3

    lora_r: int = 8
    lora_alpha: float = 32.0
    lora_dropout: float = 0.1
    prompt: str = "Describe the molecule:"
    prompt_order: str = "prompt-smiles"
    max_new: int = 64
    eval_batch: int = 64

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def validate(self) -> "Config":
        positive = ("d", "d_enc", "d_dec", "n_queries", "heads", "enc_layers", "dec_heads",
                    "max_text_len", "max_seq", "batch_size", "stage2_batch_size", "eval_batch", "lora_r")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("blocks", "dec_blocks", "epochs", "max_steps", "stage2_epochs", "stage2_max_steps",
                     "warmup", "pretrain_steps", "max_new"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.lr <= 0 or self.stage2_lr <= 0:
            raise ConfigError("learning rates must be > 0")
        if not 0 < self.decay <= 1:
            raise ConfigError(f"decay must be in (0, 1], got {self.decay}")
        if not 0 <= self.lora_dropout < 1:
            raise ConfigError(f"lora_dropout must be in [0, 1), got {self.lora_dropout}")
        if self.views not in ("both", "2d", "3d", "precombined"):
            raise ConfigError(f"views must be one of both|2d|3d|precombined, got {self.views!r}")
        if self.contrastive not in ("multi", "single"):
            raise ConfigError(f"contrastive must be multi|single, got {self.contrastive!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32|float64, got {self.precision!r}")
        if self.prompt_order not in ("prompt-smiles", "smiles-prompt"):
            raise ConfigError(f"prompt_order must be prompt-smiles|smiles-prompt, got {self.prompt_order!r}")
        for dim, h in (("d", "heads"), ("d_enc", "heads"), ("d_dec", "dec_heads")):
            if getattr(self, dim) % getattr(self, h):
                raise ConfigError(f"{dim}={getattr(self, dim)} not divisible by {h}={getattr(self, h)}")
        if self.lora_r >= self.d_dec:
            raise ConfigError(f"lora_r={self.lora_r} must be < d_dec={self.d_dec}")
        if self.max_new > self.max_seq:
            raise ConfigError(f"max_new={self.max_new} exceeds max_seq={self.max_seq}")
        return self

    def with_overrides(self, **kv) -> "Config":
        known = {f.name for f in fields(self)}
        unknown = sorted(set(kv) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return replace(self, **{k: _coerce(self, k, v) for k, v in kv.items()})

    def to_text(self, include_runtime: bool = True) -> str:
        lines = []
        for f in fields(self):
            if not include_runtime and f.name in UNHASHED:
                continue
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    def snapshot(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name not in UNHASHED}

    def hash(self) -> str:
        return hashlib.sha256(self.to_text(include_runtime=False).encode()).hexdigest()


def _coerce(cfg: Config, key: str, value):
    kind = type(next(f for f in fields(cfg) if f.name == key).default)
    if isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    try:
        if kind is int:
            return int(str(value))
        if kind is float:
            return float(str(value))
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}") from None
    return str(value)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None,
                env: dict | None = None) -> Config:
    """File values, then explicit overrides, then the two environment overrides."""
    cfg = Config()
    if path:
        p = Path(path)
        cfg = cfg.with_overrides(**parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    if overrides:
        cfg = cfg.with_overrides(**overrides)
    env = os.environ if env is None else env
    from_env = {key: env[var] for var, key in ENV_OVERRIDES.items() if env.get(var)}
    if from_env:
        cfg = cfg.with_overrides(**from_env)
    return cfg.validate()


def config_from_snapshot(snap: dict, out_dir: str = "runs") -> Config:
    return Config().with_overrides(**snap, out_dir=out_dir).validate()
