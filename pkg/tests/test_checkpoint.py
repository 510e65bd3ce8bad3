import struct

import numpy as np
import pytest

from molalign.checkpoint import (MAGIC, Checkpoint, CheckpointError, collect, file_hash, load_checkpoint,
                                 load_into, save_checkpoint)
from molalign.mqformer import MQFormer
from molalign.numerics import Rng


def _model(seed=0, d=16):
    return MQFormer(20, d=d, d_enc=d, n_queries=2, blocks=1, heads=2, max_len=8, rng=Rng(seed))


def test_round_trip_is_bitwise(tmp_path):
    arrays = collect({"mqformer": _model()})
    ck = Checkpoint(arrays, {"seed": 0}, ["[PAD]", "a"], {"stage": 1})
    digest = save_checkpoint(tmp_path / "a.ckpt", ck)
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.content_hash == digest == ck.content_hash
    assert back.vocab == ck.vocab and back.meta == ck.meta and back.config == ck.config
    for k, v in arrays.items():
        assert back.arrays[k].tobytes() == v.tobytes()
    save_checkpoint(tmp_path / "b.ckpt", back)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_load_into_restores_model(tmp_path):
    src, dst = _model(0), _model(1)
    save_checkpoint(tmp_path / "m.ckpt", Checkpoint(collect({"mqformer": src})))
    load_into(dst, load_checkpoint(tmp_path / "m.ckpt").arrays, "mqformer")
    for (n, a), (_, b) in zip(src.named_parameters(), dst.named_parameters()):
        assert np.array_equal(a.data, b.data), n


def test_shape_mismatch_and_missing_names_parameter(tmp_path):
    arrays = collect({"mqformer": _model(d=16)})
    with pytest.raises(CheckpointError, match="shape mismatch"):
        load_into(_model(d=8), arrays, "mqformer")
    key = sorted(arrays)[0]
    del arrays[key]
    with pytest.raises(CheckpointError, match=key.replace(".", r"\.")):
        load_into(_model(), arrays, "mqformer")


def test_rejects_bad_magic_version_and_corruption(tmp_path):
    p = tmp_path / "c.ckpt"
    save_checkpoint(p, Checkpoint({"w": np.arange(6, dtype=np.float32).reshape(2, 3)}))
    raw = bytearray(p.read_bytes())

    (tmp_path / "magic").write_bytes(b"X" + bytes(raw[1:]))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "magic")

    bumped = bytearray(raw)
    struct.pack_into("<I", bumped, len(MAGIC), 99)
    (tmp_path / "ver").write_bytes(bytes(bumped))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ver")

    flipped = bytearray(raw)
    flipped[-1] ^= 0xFF
    (tmp_path / "flip").write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "flip")

    (tmp_path / "short").write_bytes(bytes(raw[:-4]))
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short")


def test_missing_file_is_oserror(tmp_path):
    with pytest.raises(OSError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_file_hash_is_git_blob_sha1(tmp_path):
    p = tmp_path / "f"
    p.write_bytes(b"hello\n")
    assert file_hash(p) == "ce013625030ba8dba906f756967f9e9ca394464a"
