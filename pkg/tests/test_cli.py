import json

import pytest

from critstate import cli
from critstate.config import (
    PRESETS,
    ConfigError,
    default_config,
    dumps,
    env_overrides,
    load_config,
    merge,
    train_config,
)

TINY = {
    "dataset": {"n_success": 6, "n_fail": 6},
    "model": {"channels": [8, 16, 16, 16, 32], "hidden": 16},
    "train": {"epochs": 1, "batch_size": 4},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


class TestConfig:
    def test_presets_validate(self):
        for name in PRESETS:
            load_config(name, environ={})

    def test_unknown_key_names_its_path(self):
        with pytest.raises(ConfigError, match=r"^train\.epoch: unknown key"):
            merge(default_config(), {"train": {"epoch": 3}})

    def test_type_checked(self):
        with pytest.raises(ConfigError, match="train.epochs"):
            merge(default_config(), {"train": {"epochs": "three"}})
        assert merge(default_config(), {"train": {"epochs": 3.0}})["train"]["epochs"] == 3

    def test_bad_value_rejected_before_work(self):
        with pytest.raises(ConfigError, match="^train"):
            load_config(overrides={"train": {"learning_rate": -1.0}}, environ={})

    def test_environment_overrides(self):
        env = {"DSI_TRAIN__EPOCHS": "3", "DSI_ENV__GRID_SIZE": "19", "HOME": "/x"}
        assert env_overrides(env) == {"train": {"epochs": 3}, "env": {"grid_size": 19}}
        cfg = load_config(environ=env)
        assert train_config(cfg).epochs == 3

    def test_dumps_round_trip(self, tmp_path):
        cfg = load_config("gridworld-m", environ={})
        path = tmp_path / "c.json"
        path.write_text(dumps(cfg))
        assert load_config(str(path), environ={}) == cfg

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            load_config("/nonexistent/config.json", environ={})


class TestCli:
    def test_exit_codes(self, tmp_path, tiny_config):
        assert cli.run(["gen", "--config", "/nonexistent.json", "--out", str(tmp_path / "a")]) == 2
        assert cli.run(["detect", "--config", tiny_config, "--ckpt", str(tmp_path / "none"),
                        "--out", str(tmp_path / "b")]) == 3

    def test_refuses_non_empty_out(self, tmp_path, tiny_config):
        out = tmp_path / "gen"
        assert cli.run(["gen", "--config", tiny_config, "--out", str(out)]) == 0
        assert cli.run(["gen", "--config", tiny_config, "--out", str(out)]) == 2
        assert cli.run(["gen", "--config", tiny_config, "--out", str(out), "--force"]) == 0

    def test_gen_train_detect_eval(self, tmp_path, tiny_config):
        g, t, d, e = (str(tmp_path / x) for x in "gtde")
        assert cli.run(["gen", "--config", tiny_config, "--out", g]) == 0
        assert cli.run(["train", "--config", tiny_config, "--data", g, "--out", t]) == 0
        assert cli.run(["detect", "--config", tiny_config, "--data", g, "--ckpt", t, "--out", d]) == 0
        assert cli.run(["eval", "--config", tiny_config, "--data", g, "--ckpt", t, "--out", e]) == 0
        for run_dir in (g, t, d, e):
            names = {p.name for p in (tmp_path / run_dir).iterdir()}
            assert {"config.json", "log.txt", "metrics.json"} <= names
        masks = json.loads((tmp_path / d / "masks.json").read_text())
        assert len(masks) == 2  # one sixth of 12 episodes
        metrics = json.loads((tmp_path / e / "metrics.json").read_text())
        assert "clean_acc" in json.dumps(metrics)
