"""Experiment configuration: YAML in, validated and fully materialized out.

A config is a nested mapping; every key has a default, unknown keys are
rejected by their dotted path, and the materialized form serializes
canonically (sorted keys), so two configs describe the same experiment iff
their canonical dumps match.  Command-line overrides use the same dotted
paths ("train.lr=0.01").
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import yaml

from .datasynth import SynthSpec
from .plasticity import PlasticityConfig

__all__ = [
    "STRATEGIES",
    "DEFAULTS",
    "ExperimentConfig",
    "parse_config",
    "parse_config_text",
    "load_config",
    "apply_overrides",
    "canonical_yaml",
]

STRATEGIES = ("baseline", "dropin_unfrozen", "dropin_frozen", "lora", "plasticity")

DEFAULT_LAYERS = [
    {"type": "conv2d", "out_channels": 4, "kernel": 3, "stride": 2, "padding": 1},
    {"type": "conv2d", "out_channels": 8, "kernel": 3, "stride": 2, "padding": 1},
    {"type": "flatten"},
    {"type": "dense", "out_dim": 16, "activation": "relu"},
]

DEFAULTS: dict = {
    "experiment": {
        "name": "run",
        "seed": 42,
        "outdir": "runs/run",
    },
    "data": {
        "n_train": 2000,
        "n_dev": 500,
        "n_test": 500,
        "delta": 0.5,
        "noise": 0.3,
        "freq_bins": 16,
        "time_frames": 40,
    },
    "model": {
        "name": "smallcnn",
        "layers": DEFAULT_LAYERS,
    },
    "train": {
        "epochs": 15,
        "batch_size": 32,
        "lr": 1e-3,
        "optimizer": "adam",
    },
    "strategy": {
        "name": "baseline",
        "growth_ratio": 1.0,
        "layer_count": 1,
        "init_sigma": None,
        "stage_epochs": 5,
        "grow_layer": None,
        "lora_rank": 4,
        "lora_alpha": None,
    },
    "timing": {
        "enabled": True,
        "iters": 30,
        "warmup": 5,
    },
}

# Keys whose default is None accept this scalar type instead.
_NULLABLE_TYPES = {
    "strategy.init_sigma": float,
    "strategy.grow_layer": int,
    "strategy.lora_alpha": float,
}


def _merge(defaults, given, path=""):
    if not isinstance(given, dict):
        raise ValueError(f"config section {path or '<root>'} must be a mapping, "
                         f"got {type(given).__name__}")
    out = {}
    for key, dval in defaults.items():
        here = f"{path}.{key}" if path else key
        if key not in given:
            out[key] = copy.deepcopy(dval)
            continue
        gval = given[key]
        if isinstance(dval, dict):
            out[key] = _merge(dval, gval, here)
        else:
            out[key] = _check_scalar(here, dval, gval)
    for key in given:
        if key not in defaults:
            here = f"{path}.{key}" if path else key
            raise ValueError(f"unknown config key {here!r}")
    return out


def _check_scalar(path, default, value):
    if path == "model.layers":
        if not isinstance(value, list) or not all(isinstance(v, dict) and "type" in v
                                                  for v in value):
            raise ValueError("model.layers must be a list of mappings with a 'type' key")
        return copy.deepcopy(value)
    if value is None:
        if default is None or path in _NULLABLE_TYPES:
            return None
        raise ValueError(f"config key {path!r} must not be null")
    want = _NULLABLE_TYPES.get(path, type(default)) if default is not None \
        else _NULLABLE_TYPES.get(path)
    if want is None:
        return value
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if want is bool and not isinstance(value, bool):
        raise ValueError(f"config key {path!r} expects a boolean, got {value!r}")
    if not isinstance(value, want) or (want is int and isinstance(value, bool)):
        raise ValueError(f"config key {path!r} expects {want.__name__}, got {value!r}")
    return value


@dataclass
class ExperimentConfig:
    """A fully materialized, validated experiment description."""
    raw: dict

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def seed(self) -> int:
        return self.raw["experiment"]["seed"]

    @property
    def strategy(self) -> str:
        return self.raw["strategy"]["name"]

    def synth_spec(self) -> SynthSpec:
        d = self.raw["data"]
        return SynthSpec(n_train=d["n_train"], n_dev=d["n_dev"], n_test=d["n_test"],
                         delta=d["delta"], noise=d["noise"], seed=self.seed,
                         freq_bins=d["freq_bins"], time_frames=d["time_frames"])

    def plasticity_config(self) -> PlasticityConfig:
        s, t = self.raw["strategy"], self.raw["train"]
        return PlasticityConfig(stage_epochs=s["stage_epochs"], growth_ratio=s["growth_ratio"],
                                layer_count=s["layer_count"], init_sigma=s["init_sigma"],
                                lr=t["lr"], batch_size=t["batch_size"],
                                optimizer=t["optimizer"], seed=self.seed)

    def canonical(self) -> str:
        return canonical_yaml(self.raw)


def _validate(cfg: dict) -> None:
    if cfg["strategy"]["name"] not in STRATEGIES:
        raise ValueError(f"unknown strategy {cfg['strategy']['name']!r} "
                         f"(expected one of {', '.join(STRATEGIES)})")
    if cfg["train"]["optimizer"] not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {cfg['train']['optimizer']!r}")
    if cfg["train"]["epochs"] < 0:
        raise ValueError("train.epochs must be >= 0")
    if cfg["train"]["batch_size"] < 1:
        raise ValueError("train.batch_size must be >= 1")
    if cfg["strategy"]["stage_epochs"] < 0:
        raise ValueError("strategy.stage_epochs must be >= 0")
    if cfg["strategy"]["lora_rank"] < 1:
        raise ValueError("strategy.lora_rank must be >= 1")


def config_from_dict(given: dict | None) -> ExperimentConfig:
    cfg = _merge(DEFAULTS, given or {})
    _validate(cfg)
    return ExperimentConfig(cfg)


def parse_config_text(text: str) -> ExperimentConfig:
    given = yaml.safe_load(text)
    if given is None:
        given = {}
    return config_from_dict(given)


def parse_config(path) -> ExperimentConfig:
    """Read, merge with defaults, and validate a YAML config file."""
    with open(path) as fh:
        return parse_config_text(fh.read())


load_config = parse_config


def apply_overrides(cfg: ExperimentConfig, assignments: list[str]) -> ExperimentConfig:
    """Re-validate with dotted-path assignments like "train.lr=0.01" applied."""
    data = copy.deepcopy(cfg.raw)
    for item in assignments:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key.path=value")
        dotted, _, raw_val = item.partition("=")
        value = yaml.safe_load(raw_val) if raw_val != "" else ""
        node = data
        parts = dotted.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ValueError(f"unknown config key {dotted!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ValueError(f"unknown config key {dotted!r}")
        node[parts[-1]] = value
    return config_from_dict(data)


def canonical_yaml(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)
