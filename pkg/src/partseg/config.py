"""Run configuration: a YAML/JSON document validated against a versioned schema.

Every default is the reference setting, so an empty file (or no file) runs
the reference configuration on Stable Diffusion 2.1. Keys may be overridden by dotted path
(``inference.t_test``) or by bare name (``t_test``), which sets the key in
every section that has it.
"""
import copy
import json
import os

import jsonschema
import yaml

from .data.augment import PRESETS, AugmentationSpec
from .errors import ConfigurationError
from .optimize import OptimizationConfig

SCHEMA_VERSION = 1

DEFAULTS = {
    "version": SCHEMA_VERSION,
    "backbone": {"name": "sd21", "weights": None, "seed": 0},
    "optimization": {
        "epochs": 200, "lr": 0.1, "optimizer": "adam", "batch_size": 1, "alpha": 1.0, "beta": 0.005,
        "t_opt_range": [5, 100], "target_size": [64, 64], "gate": 0.2, "seed": 0, "augmentation": "none",
        "use_was": True, "prompt": "part", "mse_reduction": "mean", "ldm_reduction": "mean", "ce_eps": 1e-8,
        "cross_layers": None, "self_layers": None,
    },
    "inference": {"t_test": 100, "gate": 0.2, "use_was": True, "seed": 0, "target_size": [64, 64],
                  "patch": None, "iou_mode": "dataset"},
    "data": {"train": None, "val": None, "test": None},
    "split": {"n": 1, "seed": 0},
    "seeds": [0],
    "output": "runs",
}

_num = {"type": "number"}
_int = {"type": "integer"}
_pair = {"type": "array", "items": _int, "minItems": 2, "maxItems": 2}
_layers = {"type": ["array", "null"], "items": {"type": "string"}}
_path = {"type": ["string", "null"]}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "version": {"const": SCHEMA_VERSION},
        "backbone": {"type": "object", "additionalProperties": False, "properties": {
            "name": {"enum": ["toy", "sd21"]}, "weights": _path, "seed": _int}},
        "optimization": {"type": "object", "additionalProperties": False, "properties": {
            "epochs": {"type": "integer", "minimum": 0}, "lr": {"type": "number", "minimum": 0},
            "optimizer": {"enum": ["adam"]}, "batch_size": {"const": 1}, "alpha": _num, "beta": _num,
            "t_opt_range": _pair, "target_size": _pair, "gate": _num, "seed": _int,
            "augmentation": {"oneOf": [{"enum": sorted(PRESETS)}, {"type": "object"}, {"type": "null"}]},
            "use_was": {"type": "boolean"}, "prompt": {"type": "string"},
            "mse_reduction": {"enum": ["mean", "sum"]}, "ldm_reduction": {"enum": ["mean", "sum"]},
            "ce_eps": {"type": "number", "exclusiveMinimum": 0},
            "cross_layers": _layers, "self_layers": _layers}},
        "inference": {"type": "object", "additionalProperties": False, "properties": {
            "t_test": {"type": "integer", "minimum": 0}, "gate": _num, "use_was": {"type": "boolean"},
            "seed": _int, "target_size": _pair, "iou_mode": {"enum": ["dataset", "image"]},
            "patch": {"oneOf": [{"type": "null"}, {
                "type": "object", "additionalProperties": False, "required": ["size", "image_size"],
                "properties": {"size": {"type": "integer", "minimum": 1},
                               "image_size": {"type": "integer", "minimum": 1},
                               "layout": {"type": "integer", "minimum": 1}}}]}}},
        "data": {"type": "object", "additionalProperties": False,
                 "properties": {"train": _path, "val": _path, "test": _path}},
        "split": {"type": "object", "additionalProperties": False,
                  "properties": {"n": {"type": "integer", "minimum": 1}, "seed": _int}},
        "seeds": {"type": "array", "items": _int, "minItems": 1},
        "output": {"type": "string"},
    },
}


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "patch":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(cfg):
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as e:
        where = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigurationError(f"invalid config at {where}: {e.message}") from None
    lo, hi = cfg["optimization"]["t_opt_range"]
    if not 0 <= lo <= hi:
        raise ConfigurationError(f"invalid config: t_opt_range {lo, hi}")
    return cfg


def resolve(overrides=None):
    """Defaults merged with ``overrides`` and validated."""
    overrides = overrides or {}
    if not isinstance(overrides, dict):
        raise ConfigurationError("config must be a mapping")
    return validate(_merge(DEFAULTS, overrides))


def load_config(path=None):
    if path is None:
        return resolve({})
    if not os.path.exists(path):
        raise ConfigurationError(f"config file not found: {path}")
    with open(path) as f:
        try:
            raw = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigurationError(f"{path}: not valid YAML/JSON ({e})") from None
    return resolve(raw or {})


def key_paths(name, cfg=DEFAULTS):
    """Dotted paths a (possibly bare) key refers to."""
    if "." in name:
        section, key = name.split(".", 1)
        if section in cfg and isinstance(cfg[section], dict) and key in cfg[section]:
            return [name]
        raise ConfigurationError(f"unknown config key {name!r}")
    if name in cfg and not isinstance(cfg[name], dict):
        return [name]
    paths = [f"{s}.{name}" for s, v in cfg.items() if isinstance(v, dict) and name in v]
    # a bare name only reaches the backbone section when nothing else matches (``seed``
    # should reseed the run, not swap the toy model)
    if len(paths) > 1:
        paths = [p for p in paths if not p.startswith("backbone.")]
    if not paths:
        raise ConfigurationError(f"unknown config key {name!r}")
    return paths


def set_key(cfg, name, value):
    """Copy of ``cfg`` with ``name`` (dotted or bare) set to ``value``, revalidated."""
    cfg = copy.deepcopy(cfg)
    for path in key_paths(name, cfg):
        parts = path.split(".")
        target = cfg
        for p in parts[:-1]:
            target = target[p]
        target[parts[-1]] = copy.deepcopy(value)
    return validate(cfg)


def augmentation_spec(value):
    if value is None:
        return None
    if isinstance(value, str):
        return PRESETS[value]
    return AugmentationSpec.from_dict(value)


def optimization_config(cfg):
    o = dict(cfg["optimization"])
    o["augmentation"] = augmentation_spec(o["augmentation"])
    o["t_test"] = cfg["inference"]["t_test"]
    o["inference_seed"] = cfg["inference"]["seed"]
    try:
        return OptimizationConfig(**o)
    except TypeError as e:
        raise ConfigurationError(str(e)) from None


def backbone_options(cfg):
    b = cfg["backbone"]
    if b["name"] == "toy":
        return {"seed": b["seed"]}
    return {"weights": b["weights"]}


def dump(cfg):
    return json.dumps(cfg, indent=2, sort_keys=True)
