import pytest
import yaml

from splitpriv.config import ExperimentConfig, defaults_yaml, load_config, parse_config
from splitpriv.errors import ConfigError


def test_defaults_round_trip_through_yaml():
    cfg = parse_config(defaults_yaml())
    assert cfg == ExperimentConfig()
    assert cfg.digest() == ExperimentConfig().digest()


def test_digest_changes_with_content():
    assert parse_config("seed: 1").digest() != parse_config("seed: 2").digest()


def test_errors_name_file_line_and_field():
    text = "seed: 0\nclients:\n  alphas: [0.4, 1.7, 0.5]\n"
    with pytest.raises(ConfigError, match=r"<config>:3: clients\.alphas: .*\[0, 1\]"):
        parse_config(text)


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError, match="training.epoch"):
        parse_config("training:\n  epoch: 3\n")


def test_roster_consistency():
    with pytest.raises(ConfigError, match="alphas has 3 entries for n=7"):
        parse_config("clients:\n  n: 7\n")
    cfg = parse_config("", overrides=["clients.n=7", "clients.alphas=[0.5,0.5,0.5,0.5,0.5,0.5,0.5]"])
    assert cfg.clients.n == 7
    with pytest.raises(ConfigError, match="empty"):
        parse_config("clients:\n  n: 0\n  alphas: []\n")


def test_split_range_checked():
    with pytest.raises(ConfigError, match="s_max"):
        parse_config("model:\n  s_max: 6\n")
    with pytest.raises(ConfigError, match="split_points"):
        parse_config("training:\n  split_points: [1, 2, 9]\n")


def test_overrides():
    cfg = parse_config("seed: 3", overrides=["training.lr=0.5", "optimizer.t_fsim=auto"])
    assert cfg.training.lr == 0.5 and cfg.optimizer.t_fsim == "auto" and cfg.seed == 3
    with pytest.raises(ConfigError):
        parse_config("", overrides=["training.lr"])
    with pytest.raises(ConfigError):
        parse_config("", overrides=["optimizer.t_fsim=1.5"])


def test_malformed_yaml_and_missing_files(tmp_path):
    with pytest.raises(ConfigError, match="malformed"):
        parse_config("seed: [1,\n")
    with pytest.raises(ConfigError, match="top level"):
        parse_config("- 1\n")
    with pytest.raises(ConfigError, match=r"clients\.schedule: file not found"):
        parse_config("clients:\n  schedule: nowhere.txt\n", base_dir=tmp_path)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")


def test_relative_paths_resolve_against_config_dir(tmp_path):
    (tmp_path / "sched.txt").write_text("1 5 0 1 2\n")
    (tmp_path / "exp.yaml").write_text(yaml.safe_dump({"clients": {"schedule": "sched.txt"}}))
    cfg, base = load_config(tmp_path / "exp.yaml")
    assert base == tmp_path and cfg.clients.schedule == "sched.txt"
