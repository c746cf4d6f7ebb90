"""Run configuration: TOML in, validated + resolved dict out.

Every methodological constant is a config default rather than a hard-coded
value, so sensitivity studies can override any of them. Unknown keys are
rejected. ``emit_toml`` serializes a resolved config such that parsing it
back reproduces the identical run.
"""
from __future__ import annotations

import copy
import json

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .errors import ConfigError

DEFAULTS: dict = {
    "run": {
        "seed": 0,
        "jobs": 1,
        "out_dir": "",
    },
    "task": {
        "kind": "tile-class",       # tile-class | tile-reg | slide-class | slide-reg
        "probe": "lr",              # lr | knn | ridge | abmil
        "metric": "",               # "" -> default for the task kind
    },
    "models": [],                   # entries: id, embeddings, manifest | original, augmented
    "cv": {
        "outer_folds": 5,
        "inner_folds": 4,
        "n_seeds": 3,
        "seeds": [],                # [] -> [seed, seed+1, ... seed+n_seeds-1]
    },
    "bootstrap": {
        "replicates": 1000,
        "alpha": 0.05,
    },
    "probe": {
        "knn_k": 20,
        "lbfgs_max_iter": 1000,
        "lbfgs_tol": 1e-6,
        "pcc_mode": "per_target",   # per_target | flattened
    },
    "abmil": {
        "learning_rates": [5e-5, 1e-4, 2e-4],
        "attn_dims": [256, 512, 1024],
        "fc_dims": [32, 128, 256],
        "dropout": 0.6,
        "weight_decay": 1e-2,
        "beta1": 0.95,
        "beta2": 0.99,
        "eps": 1e-4,
        "max_epochs": 50,
        "patience": 10,
    },
    "qc": {
        "background_max": 0.90,
        "blackish_max": 0.05,
        "penmark_max": 0.05,
        "dark_cutoff": 60,
        "ink_floor": 100,
        "ink_margin": 30,
    },
    "augment": {
        "families": ["geo", "color", "noise", "deform"],
        "shift_frac": 0.10,
        "scale_frac": 0.10,
        "rotate_deg": 30.0,
        "brightness": 0.30,
        "contrast": 0.30,
        "gamma_low": 0.80,
        "gamma_high": 1.20,
        "noise_var_low": 1.0,
        "noise_var_high": 25.0,
        "elastic_sigma": 12.0,
        "elastic_alpha": 20.0,
    },
    "copydetect": {
        "top_k": 1,
    },
}

_MODEL_KEYS = {"id", "embeddings", "manifest", "original", "augmented"}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key == "models":
            if not isinstance(value, list):
                raise ConfigError("models must be an array of tables")
            for i, entry in enumerate(value):
                unknown = set(entry) - _MODEL_KEYS
                if unknown:
                    raise ConfigError(f"models[{i}]: unknown keys {sorted(unknown)}")
            out[key] = copy.deepcopy(value)
            continue
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, where)
        elif isinstance(base[key], dict) != isinstance(value, dict):
            raise ConfigError(f"{where!r} must be a {'table' if isinstance(base[key], dict) else 'value'}")
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | None = None, overrides: dict | None = None) -> dict:
    """Parse TOML, merge over defaults, apply CLI overrides, resolve seeds."""
    user: dict = {}
    if path is not None:
        with open(path, "rb") as fh:
            try:
                user = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
    config = _merge(DEFAULTS, user)
    if overrides:
        config = _merge(config, overrides)
    if not config["cv"]["seeds"]:
        base = config["run"]["seed"]
        config["cv"]["seeds"] = [base + i for i in range(config["cv"]["n_seeds"])]
    config["cv"]["n_seeds"] = len(config["cv"]["seeds"])
    if not config["task"]["metric"]:
        config["task"]["metric"] = {
            "tile-class": "mcc", "tile-reg": "pcc",
            "slide-class": "mcc", "slide-reg": "r2",
        }.get(config["task"]["kind"], "mcc")
    return config


def _toml_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        text = repr(value)
        if "." not in text and "e" not in text and "n" not in text:
            text += ".0"
        return text
    if isinstance(value, str):
        return json.dumps(value)
    raise ConfigError(f"cannot serialize {type(value).__name__} to TOML")


def _toml_value(value) -> str:
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    if isinstance(value, dict):
        inner = ", ".join(f"{k} = {_toml_value(v)}" for k, v in value.items())
        return "{" + inner + "}"
    return _toml_scalar(value)


def emit_toml(config: dict) -> str:
    """Serialize a resolved config; parsing the output reproduces the run."""
    lines: list[str] = []
    for key, value in config.items():
        if isinstance(value, dict) or isinstance(value, list) and value and isinstance(value[0], dict):
            continue
        lines.append(f"{key} = {_toml_value(value)}")
    if lines:
        lines.append("")
    for key, value in config.items():
        if isinstance(value, dict):
            lines.append(f"[{key}]")
            for sub, sub_value in value.items():
                lines.append(f"{sub} = {_toml_value(sub_value)}")
            lines.append("")
    for key, value in config.items():
        if isinstance(value, list) and value and isinstance(value[0], dict):
            for entry in value:
                lines.append(f"[[{key}]]")
                for sub, sub_value in entry.items():
                    lines.append(f"{sub} = {_toml_value(sub_value)}")
                lines.append("")
    return "\n".join(lines)
