"""Binary checkpoints.

Layout::

    b"MOLALIGNCKPT"  magic
    uint32 LE        format version
    uint64 LE        header length
    header           UTF-8 JSON (sorted keys): config snapshot, vocabulary,
                     metadata, and per-array {name, shape, offset, sha256}
    payload          every array as little-endian float32, in header order

The global content hash covers each array's name, shape and bytes, so two
checkpoints with equal hashes hold identical parameters.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Module

MAGIC = b"MOLALIGNCKPT"
VERSION = 1
_DT = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    vocab: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def content_hash(self) -> str:
        return content_hash(self.arrays)


def content_hash(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype=_DT)
        h.update(name.encode())
        h.update(json.dumps(list(a.shape)).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def collect(modules: dict[str, Module]) -> dict[str, np.ndarray]:
    """Prefixed parameter arrays from several modules (e.g. encoder2d, mqformer)."""
    out = {}
    for prefix, mod in modules.items():
        if mod is None:
            continue
        for name, p in mod.named_parameters():
            out[f"{prefix}.{name}"] = np.asarray(p.data, dtype=_DT)
    return out


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> str:
    entries, blobs, offset = [], [], 0
    for name in sorted(ckpt.arrays):
        a = np.ascontiguousarray(ckpt.arrays[name], dtype=_DT)
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset,
                        "sha256": hashlib.sha256(raw).hexdigest()})
        blobs.append(raw)
        offset += len(raw)
    digest = content_hash(ckpt.arrays)
    header = {"config": ckpt.config, "vocab": ckpt.vocab, "meta": ckpt.meta, "arrays": entries,
              "content_hash": digest}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", ckpt.version, len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)
    return digest


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    version, hlen = struct.unpack_from("<IQ", data, pos)
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version} unsupported (expected {VERSION})")
    pos += struct.calcsize("<IQ")
    header = json.loads(data[pos:pos + hlen].decode())
    base = pos + hlen
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64)) * _DT.itemsize
        raw = data[base + e["offset"]: base + e["offset"] + n]
        if len(raw) != n:
            raise CheckpointError(f"{path}: array {e['name']} truncated")
        if hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise CheckpointError(f"{path}: checksum mismatch for {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=_DT).reshape(e["shape"]).copy()
    ckpt = Checkpoint(arrays, header["config"], header["vocab"], header["meta"], version)
    if ckpt.content_hash != header["content_hash"]:
        raise CheckpointError(f"{path}: global content hash mismatch")
    return ckpt


def load_into(module: Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    """Copy ``prefix.*`` arrays into ``module``; every parameter must be present with its exact shape."""
    for name, p in module.named_parameters():
        key = f"{prefix}.{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint has no parameter {key!r}")
        a = arrays[key]
        if tuple(a.shape) != tuple(p.data.shape):
            raise CheckpointError(f"shape mismatch for {key!r}: checkpoint {tuple(a.shape)} vs model {p.data.shape}")
        p.data[...] = a.astype(p.data.dtype)


def file_hash(path: str | Path) -> str:
    """Git-style blob hash of a file's bytes."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
