"""Run configuration: a versioned YAML document with dotted-key overrides.

Schema (version 1); every key is optional except ``paths``::

    version: 1
    seed: 0
    paths:   {trips: FILE, zones: FILE, workdir: DIR}   # relative to the config file
    data:    {interval_length: 60, start_date: YYYY-MM-DD, end_date: YYYY-MM-DD,
              zones: [ids] | null, wrap: true, min_pair_demand: 0}
    split:   {ratio: 0.8} | {boundary_date: YYYY-MM-DD}
             validation_ratio: 0.0     # tail of the training split held out for early stopping
    graphs:  {feature_eps: 1.0e-6, distance_eps_km: 0.01, standardize_features: true}
    model:   {widths: [32, 32, 128], lstm_hidden: [128, 64], latent_spatial: null,
              latent_temporal: 100, activation: relu, post_sum_activation: true,
              demand_scale: auto}     # "auto": std of training targets, or a number
    training: {learning_rate: 5.0e-5, lr_decay: 1.0e-6, decay_mode: inverse, batch_size: 32,
               epochs: 100, l2_weight: 1.0e-4, shuffle: true, with_replacement: false,
               patience: 20}
    evaluate: {baselines: [ha, lasso, mlp, lstm, spatial-lstm], lasso_lambda: 0.01,
               mlp_hidden: 32, pair_lstm_hidden: 16, epochs: null}
"""
from __future__ import annotations

import copy
import datetime as dt
from dataclasses import fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .graphs import GraphConfig
from .training import TrainingConfig

SCHEMA_VERSION = 1

DEFAULTS: dict = {
    "version": SCHEMA_VERSION,
    "seed": 0,
    "paths": {"trips": None, "zones": None, "workdir": "work"},
    "data": {
        "interval_length": 60,
        "start_date": None,
        "end_date": None,
        "zones": None,
        "wrap": True,
        "min_pair_demand": 0,
    },
    "split": {"ratio": 0.8, "boundary_date": None, "validation_ratio": 0.0},
    "graphs": {"feature_eps": 1e-6, "distance_eps_km": 0.01, "standardize_features": True},
    "model": {
        "widths": [32, 32, 128],
        "lstm_hidden": [128, 64],
        "latent_spatial": None,
        "latent_temporal": 100,
        "activation": "relu",
        "post_sum_activation": True,
        "demand_scale": "auto",
    },
    "training": {
        "learning_rate": 5e-5,
        "lr_decay": 1e-6,
        "decay_mode": "inverse",
        "batch_size": 32,
        "epochs": 100,
        "l2_weight": 1e-4,
        "shuffle": True,
        "with_replacement": False,
        "patience": 20,
    },
    "evaluate": {
        "baselines": ["ha", "lasso", "mlp", "lstm", "spatial-lstm"],
        "lasso_lambda": 0.01,
        "mlp_hidden": 32,
        "pair_lstm_hidden": 16,
        "epochs": None,
    },
}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key} must be a mapping")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def apply_override(cfg: dict, path: list[str], value) -> None:
    node = cfg
    for part in path[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config section {'.'.join(path[:-1])!r}")
        node = node[part]
    if path[-1] not in node:
        raise ConfigError(f"unknown config key {'.'.join(path)!r}")
    node[path[-1]] = value


class RunConfig(dict):
    """Resolved configuration (a plain nested dict with helpers)."""

    base_dir: Path = Path(".")

    def path(self, key: str) -> Path | None:
        value = self["paths"].get(key)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else (self.base_dir / p)

    @property
    def workdir(self) -> Path:
        return self.path("workdir")

    def date(self, section: str, key: str) -> dt.date | None:
        value = self[section].get(key)
        if value is None:
            return None
        if isinstance(value, dt.date):
            return value
        try:
            return dt.date.fromisoformat(str(value))
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: {exc}") from exc

    def training_config(self, epochs: int | None = None) -> TrainingConfig:
        kw = dict(self["training"])
        kw["seed"] = self["seed"]
        if epochs is not None:
            kw["epochs"] = epochs
        kinds = {f.name: type(f.default) for f in fields(TrainingConfig)}
        return TrainingConfig(**{k: _coerce(f"training.{k}", v, kinds[k]) for k, v in kw.items() if k in kinds})

    def graph_config(self) -> GraphConfig:
        g = self["graphs"]
        return GraphConfig(
            _coerce("graphs.feature_eps", g["feature_eps"], float),
            _coerce("graphs.distance_eps_km", g["distance_eps_km"], float),
            _coerce("graphs.standardize_features", g["standardize_features"], bool),
        )

    def snapshot(self) -> dict:
        """Everything except filesystem paths, for embedding in checkpoints."""
        snap = copy.deepcopy(dict(self))
        snap.pop("paths", None)
        return _jsonable(snap)


def _coerce(key: str, value, kind: type):
    # YAML 1.1 reads "1e-3" (no dot) as a string, so numbers are converted explicitly
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if kind in (int, float):
        try:
            number = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key} must be a number, got {value!r}") from None
        if kind is int:
            if number != int(number):
                raise ConfigError(f"{key} must be an integer, got {value!r}")
            return int(number)
        return number
    return value


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dt.date):
        return obj.isoformat()
    return obj


def load_config(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    raw: dict = {}
    base = Path(".")
    if path is not None:
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except (yaml.YAMLError, ValueError) as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a mapping")
        base = path.parent
    version = raw.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config version {version}")
    merged = _merge(DEFAULTS, raw)
    for text in overrides:
        apply_override(merged, *parse_override(text))
    cfg = RunConfig(merged)
    cfg.base_dir = base
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    return cfg
