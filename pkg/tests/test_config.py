import pytest

from patchadapt.config import RunConfig, load_config, parse_config


def test_defaults():
    cfg = RunConfig()
    assert (cfg.gamma, cfg.lam, cfg.momentum, cfg.weight_decay, cfg.poly_power) == (0.5, 0.1, 0.9, 0.0005, 0.9)
    assert cfg.batch_size == 4 and cfg.iters == 500 and cfg.patch_size == 32 and cfg.class_count == 6
    assert cfg.pseudo_threshold is None


def test_parse_keys_aliases_and_stage_budgets():
    cfg = parse_config("""
        # comment
        gamma = 0.25
        lambda = 0.5   # alias
        iters = 10
        iters_stage2b = 3
        rescore = yes
        pseudo_threshold = 0.9
    """)
    assert cfg.gamma == 0.25 and cfg.lam == 0.5 and cfg.rescore
    assert cfg.iters_for("stage1a") == 10 and cfg.iters_for("stage2b") == 3
    assert cfg.iters_for("pretrain") == cfg.pretrain_iters
    assert cfg.pseudo_threshold == 0.9


def test_dumps_roundtrip(tmp_path):
    cfg = parse_config("gamma = 0.3\niters_stage1a = 7\ndisc_lr = 0.01\n")
    (tmp_path / "c.cfg").write_text(cfg.dumps())
    assert load_config(tmp_path / "c.cfg") == cfg
    assert "lambda = 0.1" in cfg.dumps()


@pytest.mark.parametrize("text", ["gama = 0.5", "gamma 0.5", "gamma = 2", "batch_size = 0",
                                  "objective = magic", "rescore = maybe", "lambda = -1"])
def test_invalid_config(text):
    with pytest.raises(ValueError):
        parse_config(text)


def test_overrides():
    assert parse_config("seed = 1", seed=9).seed == 9
