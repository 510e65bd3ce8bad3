import pytest

from molalign.config import Config, ConfigError, config_from_snapshot, load_config, parse_config_text


def test_defaults_validate():
    cfg = load_config(env={})
    assert cfg.alpha == 2.0 and cfg.tau == 0.1
    assert (cfg.lora_r, cfg.lora_alpha, cfg.lora_dropout) == (8, 32.0, 0.1)
    assert cfg.max_seq == 320


def test_file_then_overrides_then_env(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nseed = 3\nlr = 0.01\nviews = 2d\n\nprompt = Describe this: now\n")
    cfg = load_config(p, {"lr": "0.02"}, env={"MOLALIGN_SEED": "9", "MOLALIGN_OUT_DIR": "/tmp/x",
                                             "MOLALIGN_LR": "5"})
    assert cfg.seed == 9 and cfg.lr == 0.02 and cfg.views == "2d"
    assert cfg.out_dir == "/tmp/x"
    assert cfg.prompt == "Describe this: now"


@pytest.mark.parametrize("text", ["seed 3", " = 4"])
def test_malformed_lines(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


@pytest.mark.parametrize("over", [
    {"nope": "1"}, {"seed": "abc"}, {"tau": "0"}, {"views": "4d"}, {"contrastive": "pairs"},
    {"d": "30", "heads": "4"}, {"lora_r": "64"}, {"decay": "1.5"}, {"precision": "float16"},
    {"lora_dropout": "1.0"}, {"batch_size": "0"}, {"max_new": "400"},
])
def test_invalid_values(over):
    with pytest.raises(ConfigError):
        load_config(overrides=over, env={})


def test_hash_ignores_file_locations_only():
    a = Config()
    for key in ("out_dir", "dataset", "eval_dataset", "encoder_ckpt"):
        assert a.hash() == a.with_overrides(**{key: "elsewhere"}).hash()
        assert key not in a.snapshot()
    assert a.hash() != a.with_overrides(seed=1).hash()


def test_snapshot_round_trip():
    cfg = Config().with_overrides(seed=4, views="precombined", lr="0.5")
    back = config_from_snapshot(cfg.snapshot(), out_dir=cfg.out_dir)
    assert back == cfg and back.hash() == cfg.hash()


def test_text_round_trip(tmp_path):
    cfg = Config().with_overrides(seed=7, alpha=1.5)
    p = tmp_path / "c.cfg"
    p.write_text(cfg.to_text())
    assert load_config(p, env={}) == cfg
