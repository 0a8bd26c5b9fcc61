"""Experiment configuration: JSON files, named presets, validation and hashing.

A config is a JSON object with the sections ``problem``, ``network``,
``meta``, ``pretrain``, ``eval``, ``retention`` and ``analysis``. A file may
name a ``preset``; its own keys are then merged over that preset section by
section. See ``SCHEMA`` for every key.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .evaluation import LR_GRID
from .metatrain import OBJECTIVES, SCOPES, MetaTrainConfig

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int1 = {"type": "integer", "minimum": 1}
_int0 = {"type": "integer", "minimum": 0}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "preset": {"type": "string"},
        "seed": _int0,
        "problem": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["sine", "split"]},
                "n_functions": _int1,
                "batch_size": _int1,
                "train_pool": _int1,
                "test_pool": _int1,
                "eval_batches_per_block": _int1,
                "dataset": {"type": "string"},
                "dataset_classes": _int1,
                "dataset_dim": _int1,
                "dataset_sigma": _pos,
                "resolution": _int1,
                "n_classes": _int1,
                "meta_classes": _int1,
            },
        },
        "network": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "widths": {"type": "array", "items": _int1, "minItems": 1},
                "rln_depth": _int1,
            },
        },
        "meta": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "objective": {"enum": list(OBJECTIVES) + ["pretraining", "scratch"]},
                "inner_lr": {"type": "number", "minimum": 0},
                "meta_lr": _pos,
                "k": _int1,
                "inner_steps": _int1,
                "truncation": _int1,
                "meta_steps": _int1,
                "meta_loss_scope": {"enum": list(SCOPES)},
                "adam_beta1": _num,
                "adam_beta2": _num,
                "adam_eps": _pos,
                "clip_norm": {"type": "number", "minimum": 0},
                "divergence_norm": _pos,
                "learn_w_init": {"type": "boolean"},
                "checkpoint_every": _int0,
            },
        },
        "pretrain": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "steps": _int1,
                "lr": _pos,
                "batch_size": _int1,
                "steps_per_problem": _int1,
                "candidate_depths": {"type": "array", "items": _int1, "minItems": 1},
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_validation": _int1,
                "n_reporting": _int1,
                "lr_grid": {"type": "array", "items": _pos, "minItems": 1},
                "grid_points": _int1,
                "iid_epochs": _int0,
            },
        },
        "retention": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "seeds": {"type": "array", "items": _int0, "minItems": 5},
                "capacity": _int0,
                "replay_batch": _int0,
                "ewc_lambda": _num,
            },
        },
        "analysis": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "reshape_rows": _int1,
                "n_instances": _int0,
                "threshold": _num,
            },
        },
    },
}

_COMMON = {
    "seed": 0,
    "eval": {"n_validation": 5, "n_reporting": 10, "lr_grid": list(LR_GRID), "grid_points": 50, "iid_epochs": 5},
    "retention": {"seeds": [0, 1, 2, 3, 4], "capacity": 200, "replay_batch": 8, "ewc_lambda": 1.0},
    "analysis": {"reshape_rows": 8, "n_instances": 4, "threshold": 0.0},
}

PRESETS = {
    # Incremental sine waves with the published hyperparameters.
    "sine-paper": {
        "problem": {"kind": "sine", "n_functions": 10, "batch_size": 8, "train_pool": 400, "test_pool": 500,
                    "eval_batches_per_block": 40},
        "network": {"widths": [300] * 8, "rln_depth": 6},
        "meta": {"objective": "oml", "inner_lr": 0.003, "meta_lr": 1e-4, "k": 400, "meta_steps": 20000,
                 "meta_loss_scope": "train+test"},
        "pretrain": {"steps": 20000, "lr": 1e-4, "batch_size": 32, "steps_per_problem": 200,
                     "candidate_depths": [2, 4, 6, 8]},
        "eval": {"n_reporting": 50},
        "analysis": {"reshape_rows": 10},
    },
    "sine-desk": {
        "problem": {"kind": "sine", "n_functions": 5, "batch_size": 8, "train_pool": 400, "test_pool": 500,
                    "eval_batches_per_block": 40},
        "network": {"widths": [64, 64, 64], "rln_depth": 3},
        "meta": {"objective": "oml", "inner_lr": 0.003, "meta_lr": 1e-3, "k": 50, "meta_steps": 1000,
                 "meta_loss_scope": "train+test"},
        "pretrain": {"steps": 5000, "lr": 1e-3, "batch_size": 32, "steps_per_problem": 200,
                     "candidate_depths": [1, 2, 3]},
    },
    "split-desk": {
        "problem": {"kind": "split", "dataset": "synthetic", "dataset_classes": 200, "dataset_dim": 32,
                    "dataset_sigma": 0.3, "batch_size": 1, "n_classes": 20, "meta_classes": 20,
                    "eval_batches_per_block": 15},
        "network": {"widths": [96, 96], "rln_depth": 2},
        "meta": {"objective": "oml", "inner_lr": 0.03, "meta_lr": 1e-3, "k": 100, "meta_steps": 1000,
                 "meta_loss_scope": "train+test", "inner_steps": 5, "truncation": 5},
        "pretrain": {"steps": 3000, "lr": 1e-3, "batch_size": 32, "candidate_depths": [1, 2]},
        "analysis": {"reshape_rows": 8},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _field_path(err: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in err.absolute_path)
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        path = ".".join(filter(None, [path, *extra]))
    if err.validator == "required":
        missing = [r for r in err.validator_value if r not in err.instance]
        path = ".".join(filter(None, [path, *missing]))
    return path or "<root>"


def resolve(raw: dict, preset: str | None = None, seed: int | None = None) -> dict:
    """Validate ``raw``, apply its preset (or ``preset``) and defaults, and return a full config."""
    # required keys may come from the preset, so they are only enforced after merging
    errors = [e for e in jsonschema.Draft202012Validator(SCHEMA).iter_errors(raw) if e.validator != "required"]
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        raise ConfigError(err.message, field=_field_path(err))
    name = preset or raw.get("preset")
    if name is not None and name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}", field="preset")
    cfg = _merge(_COMMON, PRESETS[name]) if name else copy.deepcopy(_COMMON)
    cfg = _merge(cfg, {k: v for k, v in raw.items() if k != "preset"})
    if name:
        cfg["preset"] = name
    if seed is not None:
        cfg["seed"] = int(seed)
    for section in ("problem", "network", "meta"):
        if section not in cfg:
            raise ConfigError("section missing (give a preset or define it)", field=section)
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as err:
        raise ConfigError(err.message, field=_field_path(err)) from err
    net = cfg["network"]
    if "widths" not in net or "rln_depth" not in net:
        raise ConfigError("widths and rln_depth are required", field="network")
    if not 1 <= net["rln_depth"] <= len(net["widths"]):
        raise ConfigError(f"must be in [1, {len(net['widths'])}]", field="network.rln_depth")
    meta_train_config(cfg)
    return cfg


def load(path=None, preset: str | None = None, seed: int | None = None) -> dict:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found", field="--config")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}", field="--config") from exc
    elif preset is None:
        raise ConfigError("give --config or --preset", field="--config")
    return resolve(raw, preset=preset, seed=seed)


def meta_train_config(cfg: dict) -> MetaTrainConfig:
    meta = dict(cfg["meta"])
    objective = meta.get("objective", "oml")
    if objective in ("pretraining", "scratch"):
        meta["objective"] = "oml"
    try:
        return MetaTrainConfig(**meta, seed=cfg.get("seed", 0))
    except ConfigError as err:
        raise ConfigError(str(err).split(": ", 1)[-1], field=f"meta.{err.field}") from err


def normalized(cfg: dict) -> str:
    return json.dumps({k: v for k, v in cfg.items() if k != "seed"}, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    """SHA-256 over the normalized config, seed excluded."""
    return hashlib.sha256(normalized(cfg).encode()).hexdigest()
