"""Run configuration: one JSON document with sections per pipeline stage.

Defaults come from the dataclasses they feed (EnvConfig, GenerationConfig,
ArchitectureSpec, TrainConfig, LossWeights, DqnConfig), so the file on disk
only needs the keys that differ. Unknown keys are rejected with their key path.
Environment variables ``DSI_SECTION__KEY=value`` override single keys; values
are parsed as JSON when possible.
"""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, fields

from .applications import DqnConfig
from .gridworld import EnvConfig, GenerationConfig
from .models import ArchitectureSpec
from .training import LossWeights, TrainConfig

ENV_PREFIX = "DSI_"
SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending key path."""


def _defaults_of(cls, drop=()) -> dict:
    out = {}
    for f in fields(cls):
        if f.name in drop:
            continue
        v = getattr(cls(), f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def default_config() -> dict:
    train = _defaults_of(TrainConfig, drop=("label_kind", "seed"))
    train.update(asdict(LossWeights()))
    train["adam_betas"] = list(train["adam_betas"])
    return {
        "seed": 0,
        "env": _defaults_of(EnvConfig),
        "dataset": {**_defaults_of(GenerationConfig, drop=("seed",)), "test_fraction": 1 / 6},
        "model": _defaults_of(ArchitectureSpec),
        "train": train,
        "eval": {
            "tau": 0.5,
            "window": 1,
            "ablation_combinations": [["imp"], ["imp", "com"], ["imp", "rev"], ["com", "rev"], ["imp", "com", "rev"]],
            "ablation_seeds": [0, 1, 2],
            "sweep": {"lambda_r": [1e-3, 2.5e-3, 5e-3, 7.5e-3, 1e-2]},
            "plot_episodes": [0, 1, 2],
        },
        "attack": {
            "k": 3,
            "n_episodes": 300,
            "episode_seed_start": 100000,
            "rng_seeds": [0, 1, 2],
            "modes": ["critical", "random"],
            "unseen_tie_seed": 7,
        },
        "dqn": {**DqnConfig().to_dict(), "seeds": [0, 1, 2], "modes": ["adaptive", "fixed"], "grid_size": 13,
                "n_room_rows": 1, "max_steps": 60},
        "io": {"data": None, "ckpt": None, "detections": None},
    }


PRESETS = {
    # success/failure labels; 1000+1000 train, 200+200 test after the 1/6 split
    "gridworld-s": {"dataset": {"mode": "success_fail", "n_success": 1200, "n_fail": 1200}},
    # optimal policy vs. decoy-visiting policy B, labelled by policy
    "gridworld-m": {"dataset": {"mode": "policies", "policy_counts": [1200, 1195]}},
    "ablation": {"dataset": {"n_success": 1200, "n_fail": 1200}, "eval": {"ablation_seeds": [0, 1, 2]}},
    "attack": {"attack": {"k": 3, "n_episodes": 300, "rng_seeds": [0, 1, 2]}},
    # the detector feeding the DQN is trained with the orthogonality penalty switched on
    "dqn": {"train": {"lambda_orth": 1.0}, "dqn": {"modes": ["adaptive", "fixed"]}},
}


def _check_type(path: str, default, value):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
    elif isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        if isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float):
            if not value.is_integer():
                raise ConfigError(f"{path}: expected an integer, got {value!r}")
            value = int(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        value = list(value)
    return value


def merge(base: dict, override: dict, path: str = "") -> dict:
    """Deep-merge ``override`` into a copy of ``base``; keys must already exist in ``base``."""
    out = copy.deepcopy(base)
    if not isinstance(override, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object")
    for k, v in override.items():
        p = f"{path}.{k}" if path else k
        if k not in out:
            raise ConfigError(f"{p}: unknown key")
        if isinstance(out[k], dict) and k != "sweep":
            out[k] = merge(out[k], v, p)
        elif isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{p}: expected an object")
            out[k] = copy.deepcopy(v)
        else:
            out[k] = _check_type(p, out[k], v)
    return out


def env_overrides(environ=None) -> dict:
    """``DSI_TRAIN__EPOCHS=3`` -> ``{"train": {"epochs": 3}}``."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        keys = [k.lower() for k in name[len(ENV_PREFIX) :].split("__")]
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return out


def load_config(source=None, overrides=None, environ=None) -> dict:
    """Resolve defaults + preset or file + explicit overrides + environment."""
    cfg = default_config()
    if source:
        if source in PRESETS:
            cfg = merge(cfg, PRESETS[source])
        else:
            try:
                with open(source) as fh:
                    doc = json.load(fh)
            except FileNotFoundError:
                raise ConfigError(f"<config>: no preset or file named {source!r}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"<config>: {source} is not valid JSON ({exc})") from None
            doc.pop("schema", None)
            cfg = merge(cfg, doc)
    if overrides:
        cfg = merge(cfg, overrides)
    env = env_overrides(environ)
    if env:
        cfg = merge(cfg, env)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    """Build every typed config once so bad values fail before any work starts."""
    for section, build in (
        ("env", env_config),
        ("dataset", generation_config),
        ("model", architecture_spec),
        ("train", train_config),
        ("train", loss_weights),
        ("dqn", dqn_config),
    ):
        try:
            build(cfg)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}: {exc}") from None
    if not 0 < cfg["dataset"]["test_fraction"] < 1:
        raise ConfigError("dataset.test_fraction: must be in (0, 1)")
    if cfg["attack"]["k"] < 0:
        raise ConfigError("attack.k: must be >= 0")
    for m in cfg["attack"]["modes"]:
        if m not in ("critical", "random"):
            raise ConfigError(f"attack.modes: unknown mode {m!r}")
    for m in cfg["dqn"]["modes"]:
        if m not in ("adaptive", "fixed", "random"):
            raise ConfigError(f"dqn.modes: unknown mode {m!r}")


def env_config(cfg: dict) -> EnvConfig:
    return EnvConfig(**cfg["env"])


def generation_config(cfg: dict) -> GenerationConfig:
    d = {k: v for k, v in cfg["dataset"].items() if k != "test_fraction"}
    return GenerationConfig(**d, seed=cfg["seed"])


def architecture_spec(cfg: dict) -> ArchitectureSpec:
    return ArchitectureSpec(**cfg["model"])


def train_config(cfg: dict) -> TrainConfig:
    d = {k: v for k, v in cfg["train"].items() if not k.startswith("lambda_")}
    return TrainConfig(**d, seed=cfg["seed"], label_kind=cfg["dataset"]["label_kind"])


def loss_weights(cfg: dict) -> LossWeights:
    return LossWeights(**{k: v for k, v in cfg["train"].items() if k.startswith("lambda_")})


def dqn_config(cfg: dict) -> DqnConfig:
    extra = ("seeds", "modes", "grid_size", "n_room_rows", "max_steps")
    return DqnConfig(**{k: v for k, v in cfg["dqn"].items() if k not in extra})


def dqn_env_config(cfg: dict) -> EnvConfig:
    d = cfg["dqn"]
    return EnvConfig(grid_size=d["grid_size"], n_room_rows=d["n_room_rows"], max_steps=d["max_steps"])


def dumps(cfg: dict) -> str:
    return json.dumps({"schema": SCHEMA_VERSION, **cfg}, indent=2, sort_keys=True)
