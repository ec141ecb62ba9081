import json

import pytest

from lstm_sv.config import RunConfig, config_from_dict, load_config, with_overrides
from lstm_sv.errors import ConfigError


def test_defaults_round_trip():
    cfg = RunConfig()
    assert config_from_dict(json.loads(cfg.dumps())) == cfg


def test_phase_defaults_survive_partial_sections():
    cfg = config_from_dict({"finetune": {"epochs": 3}})
    assert cfg.finetune.epochs == 3
    assert cfg.finetune.phase == "finetune"
    assert cfg.finetune.learning_rate == RunConfig().finetune.learning_rate
    assert cfg.pretrain == RunConfig().pretrain


@pytest.mark.parametrize("data", [
    {"bogus": 1},
    {"features": {"num_filter": 40}},
    {"pretrain": {"lr": 0.1}},
    {"features": {"window_ms": -5}},
    {"eval": {"segments": 0}},
    {"vad": 3},
])
def test_bad_config_is_rejected(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_yaml_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("lstm:\n  hidden_dim: 64\ncontrastive:\n  margin: 2.0\n")
    cfg = load_config(p)
    assert cfg.lstm.hidden_dim == 64 and cfg.contrastive.margin == 2.0
    assert cfg.lstm_config().input_dim == 40


def test_overrides_target_one_phase():
    cfg = with_overrides(RunConfig(), phase="finetune", learning_rate=0.3, th0=2.0, epochs=None)
    assert cfg.finetune.learning_rate == 0.3 and cfg.finetune.th0 == 2.0
    assert cfg.pretrain == RunConfig().pretrain


def test_seed_reaches_every_stream():
    cfg = with_overrides(RunConfig(), phase="pretrain", seed=7)
    assert cfg.pretrain.seed == cfg.finetune.seed == cfg.gmm.seed == 7


def test_duration_moves_crops_and_eval():
    cfg = with_overrides(RunConfig(), duration_s=2.0)
    assert cfg.eval.duration_s == cfg.pretrain.crop_duration_s == cfg.finetune.crop_duration_s == 2.0


def test_gmm_features_are_mfcc():
    cfg = RunConfig()
    assert cfg.gmm_features().mode == "mfcc"
    assert cfg.features.mode == "log_filterbank"
