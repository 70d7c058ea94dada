"""Pipeline configuration: defaults, schema validation and file loading.

A config is a single JSON or TOML file (picked by extension). Only
``schema_version`` and ``workdir`` are required; every other key falls back
to the defaults below. Unknown keys are rejected so typos surface early.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any

import jsonschema

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Schema violation or unreadable config file."""


DEFAULTS: dict[str, Any] = {
    "data": {
        "source": "synthetic",
        "resolution": 64,
        "n_identities": 300,
        "per_identity": 4,
        "pose_jitter": 1.0,
        "seed": 0,
    },
    "autoencoder": {"mode": "conv", "latent_channels": 4, "width": 32, "epochs": 60, "lr": 3e-3, "seed": 0},
    "diffusion": {
        "T": 20,
        "beta_min": 0.005,
        "beta_max": 0.2,
        "width": 32,
        "epochs": 40,
        "p_drop": 0.1,
        "cond_grid": 4,
        "seed": 0,
    },
    "embedders": {"arch_seeds": [0, 1, 2, 3], "epochs": 15, "heldout": 3},
    "attack": {
        "N": 30,
        "alpha": 0.01,
        "mu": 0.6,
        "s": 1.0,
        "lambda_s": 3.0,
        "strength": 0.75,
        "mask_mode": "oval",
        "mask_path": None,
        "seeds": [0, 1],
    },
    "crm": {
        "n_blocks": 3,
        "hidden": 32,
        "key_channels": 4,
        "clamp": 2.0,
        "loss_weights": {"hiding": 1.0, "decoy": 2.0, "secret": 4.0, "low_freq": 1.0, "wrong_key": 1.0},
        "epochs": 40,
        "n_triples": 256,
        "crop": 32,
        "batch_size": 16,
        "lr": 1e-3,
        "seed": 0,
    },
    "eval": {"far_target": 0.01, "n_test": 50, "rotate_heldout": True, "ablate_momentum": False, "seed": 0},
}

_int = {"type": "integer"}
_num = {"type": "number"}
_pos_int = {"type": "integer", "minimum": 1}
_nonneg_int = {"type": "integer", "minimum": 0}
_prob = {"type": "number", "minimum": 0, "maximum": 1}


def _block(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "workdir"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "workdir": {"type": "string", "minLength": 1},
        "data": _block({
            "source": {"type": "string", "minLength": 1},
            "resolution": {"type": "integer", "minimum": 16, "multipleOf": 8},
            "n_identities": {"type": "integer", "minimum": 2},
            "per_identity": _pos_int,
            "pose_jitter": {"type": "number", "minimum": 0},
            "seed": _int,
        }),
        "autoencoder": _block({
            "mode": {"enum": ["conv", "identity"]},
            "latent_channels": _pos_int,
            "width": {"type": "integer", "minimum": 2, "multipleOf": 2},
            "epochs": _nonneg_int,
            "lr": {"type": "number", "exclusiveMinimum": 0},
            "seed": _int,
        }),
        "diffusion": _block({
            "T": _pos_int,
            "beta_min": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "beta_max": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "width": {"type": "integer", "minimum": 8, "multipleOf": 8},
            "epochs": _nonneg_int,
            "p_drop": _prob,
            "cond_grid": _pos_int,
            "seed": _int,
        }),
        "embedders": _block({
            "arch_seeds": {"type": "array", "items": _nonneg_int, "minItems": 2, "uniqueItems": True},
            "epochs": _nonneg_int,
            "heldout": _nonneg_int,
        }),
        "attack": _block({
            "N": _nonneg_int,
            "alpha": {"type": "number", "exclusiveMinimum": 0},
            "mu": {"type": "number", "minimum": 0},
            "s": _num,
            "lambda_s": _num,
            "strength": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "mask_mode": {"enum": ["oval", "full", "external"]},
            "mask_path": {"type": ["string", "null"]},
            "seeds": {"type": "array", "items": _int, "minItems": 2, "maxItems": 2},
        }),
        "crm": _block({
            "n_blocks": _pos_int,
            "hidden": _pos_int,
            "key_channels": _pos_int,
            "clamp": {"type": "number", "exclusiveMinimum": 0},
            "loss_weights": _block({k: {"type": "number", "minimum": 0}
                                    for k in ("hiding", "decoy", "secret", "low_freq", "wrong_key")}),
            "epochs": _nonneg_int,
            "n_triples": _pos_int,
            "crop": {"type": ["integer", "null"], "minimum": 4, "multipleOf": 4},
            "batch_size": _pos_int,
            "lr": {"type": "number", "exclusiveMinimum": 0},
            "seed": _int,
        }),
        "eval": _block({
            "far_target": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "n_test": _pos_int,
            "rotate_heldout": {"type": "boolean"},
            "ablate_momentum": {"type": "boolean"},
            "seed": _int,
        }),
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _describe(err: jsonschema.ValidationError) -> str:
    where = ".".join(str(p) for p in err.absolute_path) or "<root>"
    if err.validator == "required":
        missing = [k for k in err.validator_value if k not in err.instance]
        return f"missing required key(s) {', '.join(missing)} at {where}"
    if err.validator == "additionalProperties":
        return f"unknown key at {where}: {err.message}"
    return f"invalid value at {where}: {err.message}"


def validate(doc: dict) -> None:
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError("; ".join(_describe(e) for e in errors))


class PipelineConfig:
    """Validated config with defaults filled in. Blocks are plain dicts."""

    def __init__(self, doc: dict, base_dir: str | Path | None = None):
        validate(doc)
        full = _merge(DEFAULTS, doc)
        validate(full)
        if full["diffusion"]["beta_min"] > full["diffusion"]["beta_max"]:
            raise ConfigError("invalid value at diffusion: beta_min exceeds beta_max")
        if full["embedders"]["heldout"] not in full["embedders"]["arch_seeds"]:
            raise ConfigError("invalid value at embedders.heldout: not one of arch_seeds")
        crop = full["crm"]["crop"]
        if crop and full["data"]["resolution"] % crop:
            raise ConfigError("invalid value at crm.crop: must divide data.resolution")
        if full["attack"]["seeds"][0] == full["attack"]["seeds"][1]:
            raise ConfigError("invalid value at attack.seeds: seeds must differ")
        self.raw = doc
        self.doc = full
        self.base_dir = Path(base_dir) if base_dir is not None else Path.cwd()

    def __getitem__(self, key: str):
        return self.doc[key]

    @property
    def workdir(self) -> Path:
        p = Path(self.doc["workdir"])
        return p if p.is_absolute() else self.base_dir / p

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def block_hash(self, *blocks: str) -> str:
        """Hash of the named blocks, so a checkpoint is tied to the settings it used."""
        sub = {b: self.doc[b] for b in blocks}
        return hashlib.sha256(json.dumps(sub, sort_keys=True).encode()).hexdigest()[:16]

    def config_hash(self) -> str:
        doc = {k: v for k, v in self.doc.items() if k != "workdir"}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    def to_json(self) -> str:
        return json.dumps(self.doc, indent=2, sort_keys=True)


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        if path.suffix.lower() == ".toml":
            doc = tomllib.loads(text.decode("utf-8"))
        else:
            doc = json.loads(text)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping at top level")
    # TOML has no null; an empty mask_path string means "none"
    if doc.get("attack", {}).get("mask_path") == "":
        doc["attack"]["mask_path"] = None
    return PipelineConfig(doc, base_dir=path.parent)
