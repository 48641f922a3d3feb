"""Experiment configuration: JSON schema, defaults and conversion to run objects.

A user file is deep-merged over the bundled ``default.json`` and the result
is validated against :data:`SCHEMA`; unknown keys anywhere are rejected and
violations are reported with the JSON pointer of the offending value.
"""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .fip import FipConfig
from .smoothness import AnalysisConfig
from .train import TrainConfig

SCHEMA_VERSION = 1


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_INT = {"type": "integer"}
_POSINT = {"type": "integer", "minimum": 1}
_SEED = {"type": "integer", "minimum": 0}

_TRAIN = _obj(
    {
        "lr": _POS,
        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "weight_decay": _NONNEG,
        "epochs": {"type": "integer", "minimum": 0},
        "batch_size": _POSINT,
        "lr_decay_factor": _POS,
        "lr_decay_period": _POSINT,
        "seed": _SEED,
        "adaptive_eta_F": _NONNEG,
        "trace_grad_period": _POSINT,
    },
    required=["seed"],
)

SCHEMA = _obj(
    {
        "dataset": _obj(
            {
                "source": {"enum": ["synthetic", "idx"]},
                "class_count": {"type": "integer", "minimum": 2},
                "per_class": _POSINT,
                "test_per_class": _POSINT,
                "image_size": {"type": "integer", "minimum": 8},
                "noise_level": _NONNEG,
                "contrast": {"type": "number", "minimum": 0, "maximum": 0.5},
                "seed": _SEED,
                "test_seed": _SEED,
                "train_images": {"type": "string"},
                "train_labels": {"type": "string"},
                "test_images": {"type": "string"},
                "test_labels": {"type": "string"},
                "val_fraction": {"type": ["number", "null"], "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "val_per_class": {"type": ["integer", "null"], "minimum": 1},
                "split_seed": _SEED,
            },
            required=["source", "seed", "split_seed"],
        ),
        "attack": _obj(
            {
                "kind": {"enum": ["patch", "blend"]},
                "size": {"type": "integer", "minimum": 0},
                "value": {"type": "number", "minimum": 0, "maximum": 1},
                "row": {"type": ["integer", "null"], "minimum": 0},
                "col": {"type": ["integer", "null"], "minimum": 0},
                "alpha": {"type": "number", "minimum": 0, "maximum": 1},
                "pattern_seed": _SEED,
                "poison_rate": {"type": "number", "minimum": 0, "maximum": 1},
                "label_map": {"enum": ["all2one", "all2all"]},
                "target": {"type": "integer", "minimum": 0},
                "seed": _SEED,
            },
            required=["seed"],
        ),
        "model": _obj({"hidden": {"type": "array", "items": _POSINT}, "seed": _SEED}, required=["seed"]),
        "train": _obj({"benign": _TRAIN, "backdoor": _TRAIN}, required=["benign", "backdoor"]),
        "analysis": _obj(
            {
                "batch_size": _POSINT,
                "batch_seed": _SEED,
                "power_iters": _POSINT,
                "tol": _POS,
                "probes": {"type": "integer", "minimum": 2},
                "seed": _SEED,
                "lanczos_steps": {"type": "integer", "minimum": 2},
                "density_probes": _POSINT,
            },
            required=["seed", "batch_seed"],
        ),
        "defense": _obj(
            {
                "mode": {"enum": ["fip", "ffip", "vanilla-ft"]},
                "eta_F": _NONNEG,
                "eta_r": _NONNEG,
                "lr": _POS,
                "ffip_lr": _POS,
                "epochs": {"type": "integer", "minimum": 0},
                "lr_decay_factor": _POS,
                "lr_decay_period": _POSINT,
                "trace_grad_period": _POSINT,
                "batch_size": _POSINT,
                "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "weight_decay": _NONNEG,
                "seed": _SEED,
            },
            required=["mode", "seed"],
        ),
        "report": _obj({"output_dir": {"type": "string"}}),
    },
    required=["dataset", "attack", "model", "train", "analysis", "defense", "report"],
)


def default_config():
    text = resources.files("fiplab").joinpath("default.json").read_text()
    return json.loads(text)


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _pointer(path):
    return "/" + "/".join(str(p).replace("~", "~0").replace("/", "~1") for p in path)


def validate(cfg):
    """Raise :class:`ConfigError` (with a JSON pointer) unless ``cfg`` fits the schema."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = errors[0]
        path = list(err.absolute_path)
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            path = path + extra[:1]
            raise ConfigError(f"unknown key {extra[0]!r}", _pointer(path))
        raise ConfigError(err.message, _pointer(path))
    ds = cfg["dataset"]
    if (ds.get("val_fraction") is None) == (ds.get("val_per_class") is None):
        raise ConfigError("set exactly one of val_fraction and val_per_class", "/dataset")
    if ds["source"] == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if key not in ds:
                raise ConfigError("required for idx datasets", f"/dataset/{key}")
            if not Path(ds[key]).exists():
                raise ConfigError(f"file {ds[key]} does not exist", f"/dataset/{key}")
    if cfg["attack"]["target"] >= ds["class_count"]:
        raise ConfigError("target must be a valid class", "/attack/target")
    return cfg


def load_config(path=None, overrides=None):
    """Defaults, then the JSON file at ``path``, then ``overrides``; validated."""
    cfg = default_config()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    return validate(cfg)


def config_checksum(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def train_config(section):
    return TrainConfig(**section)


def fip_config(section, for_ffip=False):
    fields = {k: v for k, v in section.items() if k not in ("mode", "ffip_lr")}
    if for_ffip and "ffip_lr" in section:
        fields["lr"] = section["ffip_lr"]
    return FipConfig(**fields)


def analysis_config(section):
    keys = ("power_iters", "tol", "probes", "seed", "lanczos_steps", "density_probes")
    return AnalysisConfig(**{k: section[k] for k in keys if k in section})
