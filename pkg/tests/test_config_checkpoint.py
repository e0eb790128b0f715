import numpy as np
import pytest

from chargeforecast import checkpoint as ck
from chargeforecast.config import ConfigError, ExperimentConfig
from chargeforecast.data import NormalizationStats
from chargeforecast.embedding import EmbeddingConfig
from chargeforecast.model import ModelConfig, init_params, predict_array


def test_defaults_follow_reference_settings():
    cfg = ExperimentConfig()
    assert cfg.seed == 2023 and cfg.horizons == (3, 6, 9, 12)
    assert (cfg.embedding.layers, cfg.embedding.heads, cfg.embedding.beta) == (2, 4, 0.5)
    assert (cfg.train.lr, cfg.train.weight_decay, cfg.train.batch_size) == (0.001, 0.00001, 512)
    assert (cfg.meta.meta_lr, cfg.meta.epochs) == (0.005, 200)
    assert [law.elasticity for law in cfg.laws] == [-1.48, -0.228]


def test_yaml_round_trip(tmp_path):
    cfg = ExperimentConfig.from_dict({"seed": 7, "train": {"max_epochs": 3, "horizon": 6},
                                      "meta": {"epochs": 2}, "horizons": [6],
                                      "laws": [{"label": "a", "elasticity": -0.5}]})
    assert cfg.train.seed == 7 and cfg.market.seed == 7
    cfg.dump(tmp_path / "c.yaml")
    back = ExperimentConfig.load(tmp_path / "c.yaml")
    assert back == cfg and back.digest() == cfg.digest()


@pytest.mark.parametrize("raw, key", [
    ({"bogus": 1}, "bogus"),
    ({"train": {"learning_rate": 0.1}}, "train.learning_rate"),
    ({"market": {"seed": 4}}, "market.seed"),
    ({"laws": [{"label": "x", "elasticity": -1, "extra": 2}]}, "laws.extra"),
])
def test_unknown_keys_rejected(raw, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        ExperimentConfig.from_dict(raw)


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"laws": [{"label": "up", "elasticity": 0.4}]})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"horizons": [0]})


def test_bad_yaml(tmp_path):
    (tmp_path / "c.yaml").write_text("seed: [1,\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "c.yaml")
    (tmp_path / "d.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "d.yaml")


def test_overrides():
    cfg = ExperimentConfig().override(seed=5, horizon=9, output_dir=None)
    assert cfg.seed == 5 and cfg.train.horizon == 9 and cfg.output_dir == "out"
    assert cfg.train.seed == 5
    assert cfg.digest() != ExperimentConfig().digest()


def test_checkpoint_round_trip_is_bitwise(tmp_path, toy5):
    model = ModelConfig(window=4, embedding=EmbeddingConfig(heads=2))
    rng = np.random.default_rng(3)
    params = init_params(model, rng)
    stats = NormalizationStats(rng.normal(size=(5, 2)), rng.uniform(0.5, 2, size=(5, 2)))
    path = ck.save(tmp_path / "m.npz", ck.Checkpoint(params, model, stats, 6, "abc", {"stage": "x"}))
    back = ck.load(path)
    assert back.model == model and back.horizon == 6 and back.config_digest == "abc"
    assert back.notes == {"stage": "x"}
    for k in params:
        assert back.params[k].dtype == params[k].dtype
        assert back.params[k].tobytes() == params[k].tobytes()
    assert back.stats.mean.tobytes() == stats.mean.tobytes()
    x = rng.normal(size=(3, 5, 4, 2))
    assert predict_array(back.params, x, toy5, back.model).tobytes() == \
        predict_array(params, x, toy5, model).tobytes()


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.npz"):
        ck.load(tmp_path / "nope.npz")


def test_corrupt_checkpoint(tmp_path):
    (tmp_path / "bad.npz").write_bytes(b"not a zip")
    with pytest.raises(ck.CheckpointError):
        ck.load(tmp_path / "bad.npz")
