import pytest

from c2fed import config
from c2fed.errors import ConfigError


def test_defaults_match_desk_setting():
    cfg = config.load(None)
    assert cfg.federation.num_clients == 5 and cfg.federation.rounds_per_stage == 3
    assert cfg.federation.new_task_client_fraction == 0.4
    assert cfg.prompts.prompt_len == 10 and cfg.prompts.num_prompts == 8
    assert cfg.training.lr == 0.01 and cfg.training.p_use_comp == 0.5 and cfg.training.epochs == 5
    assert cfg.training.tau == 1.0 and not cfg.training.normalize_histograms
    assert cfg.encoder.kind == "single-head-attention" and cfg.encoder.d == 16


def test_overrides_are_typed():
    cfg = config.load(None, ["training.tau=0.5", "training.normalize_histograms=true", "seed=4", "mode=baseline"])
    assert cfg.training.tau == 0.5 and cfg.training.normalize_histograms is True
    assert cfg.seed == 4 and cfg.mode == "baseline"
    assert not cfg.lcdc_enabled and not cfg.cpa_enabled


@pytest.mark.parametrize("bad", ["bogus=1", "training.bogus=1", "logit_scope=task"])
def test_unknown_key_named(bad):
    with pytest.raises(ConfigError, match=bad.split("=")[0].replace(".", r"\.")):
        config.load(None, [bad])


@pytest.mark.parametrize("bad", ["mode=turbo", "training.tau=0", "training.p_use_comp=2",
                                 "encoder.feature_dim=8", "federation.num_clients=0", "seed=1.5", "noequals"])
def test_invalid_values(bad):
    with pytest.raises(ConfigError):
        config.load(None, [bad])


def test_yaml_file_and_dump_roundtrip(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("seed: 9\ntraining:\n  beta: 0.25\n")
    cfg = config.load(path)
    assert cfg.seed == 9 and cfg.training.beta == 0.25
    cfg.dump(tmp_path / "echo.yaml")
    assert config.load(tmp_path / "echo.yaml").to_dict() == cfg.to_dict()


def test_unreadable_file():
    with pytest.raises(ConfigError):
        config.load("/nonexistent/cfg.yaml")
