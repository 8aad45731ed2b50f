import pytest

from advdef.config import (config_from_dict, config_hash, config_to_dict,
                           default_desk_config, load_config, parse_fraction,
                           save_config)
from advdef.errors import ConfigError
from conftest import tiny_config


def test_parse_fraction_forms():
    assert parse_fraction("16/255") == pytest.approx(16 / 255)
    assert parse_fraction("0.01") == 0.01
    assert parse_fraction(0.5) == 0.5
    with pytest.raises(ConfigError):
        parse_fraction("16/0")
    with pytest.raises(ConfigError):
        parse_fraction("abc")


def test_default_desk_config_mirrors_pairing_invariant():
    cfg = default_desk_config()
    n = len(cfg.attacks.train_attacks)
    assert cfg.dataset.train_per_class == cfg.pairing_per_attack * n == 18


def test_per_class_invariant_enforced():
    cfg = default_desk_config()
    cfg.dataset.train_per_class = 17
    with pytest.raises(ConfigError, match="pairing_per_attack"):
        cfg.validate()


def test_seed_required():
    with pytest.raises(ConfigError, match="seed"):
        config_from_dict({"dataset": {}})


def test_held_out_attack_rejected_in_training_list():
    cfg = default_desk_config()
    cfg.attacks.train_attacks = ("fgsm", "deepfool")
    with pytest.raises(ConfigError, match="deepfool"):
        cfg.validate()


def test_schedule_must_cover_epochs():
    cfg = default_desk_config()
    cfg.defense.schedule = [{"start": 0, "end": 50, "lambda1": 100, "lambda2": 1}]
    with pytest.raises(ConfigError, match="schedule"):
        cfg.validate()


def test_schedule_must_be_contiguous():
    cfg = default_desk_config()
    cfg.defense.schedule = [
        {"start": 0, "end": 40, "lambda1": 100, "lambda2": 100},
        {"start": 50, "end": 100, "lambda1": 100, "lambda2": 1},
    ]
    with pytest.raises(ConfigError, match="contiguous"):
        cfg.validate()


def test_unknown_fields_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        config_from_dict({"seed": 0, "dataset": {"bogus": 1}})
    with pytest.raises(ConfigError, match="unknown"):
        config_from_dict({"seed": 0, "bogus": 1})


def test_yaml_round_trip(tmp_path):
    cfg = tiny_config(seed=7)
    path = tmp_path / "config.yaml"
    save_config(cfg, path)
    loaded = load_config(path)
    assert config_to_dict(loaded) == config_to_dict(cfg)
    assert config_hash(loaded) == config_hash(cfg)


def test_epsilon_fraction_in_yaml(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text("seed: 0\nattacks:\n  epsilon: 16/255\n"
                    "dataset:\n  train_per_class: 18\n")
    cfg = load_config(path)
    assert cfg.attacks.epsilon == pytest.approx(16 / 255)


def test_hash_ignores_locations():
    a = tiny_config()
    b = tiny_config()
    b.output_dir = "elsewhere"
    b.dataset.data_dir = "/tmp/other"
    assert config_hash(a) == config_hash(b)
    c = tiny_config(seed=9)
    assert config_hash(a) != config_hash(c)


def test_missing_config_file():
    with pytest.raises(ConfigError, match="not found"):
        load_config("/nonexistent/config.yaml")
