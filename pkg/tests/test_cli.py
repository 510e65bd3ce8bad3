import json
from pathlib import Path

import numpy as np
import pytest

from molalign.checkpoint import load_checkpoint
from molalign.cli import main

TINY = ["--d", "16", "--d-enc", "16", "--d-dec", "16", "--n-queries", "2", "--blocks", "1", "--heads", "2",
        "--enc-layers", "1", "--dec-blocks", "1", "--dec-heads", "2", "--lora-r", "2", "--batch-size", "8",
        "--stage2-batch-size", "8", "--max-new", "8", "--warmup", "5", "--pretrain-steps", "5"]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data.jsonl"
    assert main(["gen-synthetic", "--n", "24", "--seed", "5", "--out", str(data)]) == 0
    out = root / "run"
    base = TINY + ["--dataset", str(data), "--out-dir", str(out)]
    assert main(["train-stage1", *base, "--epochs", "1"]) == 0
    assert main(["train-stage2", *base, "--ckpt", str(out / "stage1.ckpt"), "--stage2-epochs", "1"]) == 0
    return root, data, out, base


def test_gen_synthetic_line_count(tmp_path, capsys):
    p = tmp_path / "d.jsonl"
    assert main(["gen-synthetic", "--n", "100", "--seed", "1", "--out", str(p)]) == 0
    assert len(p.read_text().splitlines()) == 100
    assert json.loads(capsys.readouterr().out)["written"] == 100


def test_stage1_log_and_checkpoint(run):
    _, _, out, _ = run
    lines = [json.loads(x) for x in (out / "stage1.log.jsonl").read_text().splitlines()]
    assert lines[0]["type"] == "header" and lines[0]["dataset_hash"]
    steps = [x for x in lines if x["type"] == "step"]
    assert len(steps) == 3
    for s in steps:
        assert abs(s["total"] - (s["mtc"] + s["mtm"] + s["alpha"] * s["mcap"])) <= 1e-6
    ck = load_checkpoint(out / "stage1.ckpt")
    assert ck.meta["stage"] == 1 and ck.meta["config_hash"] == lines[0]["config_hash"]


def test_stage2_trains_only_lora_and_mqformer(run):
    _, _, out, _ = run
    s1, s2 = load_checkpoint(out / "stage1.ckpt"), load_checkpoint(out / "stage2.ckpt")
    for k, v in s1.arrays.items():
        if k.startswith("encoder"):
            assert np.array_equal(v, s2.arrays[k]), k
    assert any(not np.array_equal(s1.arrays[k], s2.arrays[k]) for k in s1.arrays if k.startswith("mqformer"))
    assert any(k.endswith(".A") for k in s2.arrays)


@pytest.mark.parametrize("task", ["retrieval", "caption", "diversity", "attn"])
def test_eval_tasks(run, task):
    _, _, out, base = run
    assert main(["eval", *base, "--ckpt", str(out / "stage2.ckpt"), "--task", task, "--limit", "4"]) == 0
    report = json.loads((out / f"metrics_{task}.json").read_text())
    assert report["config_hash"] == load_checkpoint(out / "stage2.ckpt").meta["config_hash"]
    if task == "retrieval":
        assert set(report["retrieval"]) == {"in_batch", "full_set"}
    if task == "caption":
        rows = (out / "captions.jsonl").read_text().splitlines()
        assert len(rows) == 24 and {"id", "prediction", "reference"} <= set(json.loads(rows[0]))


def test_attn_dump(run, tmp_path):
    _, _, out, base = run
    dest = tmp_path / "attn.jsonl"
    assert main(["attn-dump", *base, "--ckpt", str(out / "stage1.ckpt"), "--out", str(dest), "--limit", "3"]) == 0
    rec = json.loads(dest.read_text().splitlines()[0])
    assert "query_vector" in rec


def test_views_2d_leaves_3d_encoder_untouched(run, tmp_path):
    _, data, out, base = run
    other = tmp_path / "v2d"
    args = TINY + ["--dataset", str(data), "--out-dir", str(other), "--views", "2d", "--epochs", "1"]
    assert main(["train-stage1", *args]) == 0
    ref = load_checkpoint(out / "stage1.ckpt")
    ck = load_checkpoint(other / "stage1.ckpt")
    for k in ck.arrays:
        if k.startswith("encoder3d"):
            assert np.array_equal(ck.arrays[k], ref.arrays[k])


def test_exit_codes(run, tmp_path, capsys):
    _, data, out, base = run
    assert main(["eval", *base, "--ckpt", str(out / "stage1.ckpt"), "--task", "bogus"]) == 1
    assert main(["eval", *base, "--ckpt", str(out / "stage1.ckpt"), "--task", "caption"]) == 1
    assert main(["eval", *base, "--ckpt", str(tmp_path / "missing.ckpt"), "--task", "retrieval"]) == 2
    assert main(["train-stage1", *TINY, "--dataset", str(tmp_path / "none.jsonl")]) == 2
    assert main(["train-stage1", *TINY, "--dataset", str(data), "--tau", "-1"]) == 1
    assert main(["train-stage1", *TINY, "--dataset", str(data), "--set", "unknown=3"]) == 1
    assert main(["train-stage2", *base, "--d", "32", "--d-enc", "32", "--ckpt", str(out / "stage1.ckpt")]) == 1
    assert main(["no-such-command"]) == 1
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    assert main(["train-stage1", *TINY, "--dataset", str(bad)]) == 1
    err = capsys.readouterr().err
    assert "error:" in err


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--batches", "1"]) == 0
    assert json.loads(capsys.readouterr().out)["passed"] is True
