"""Run configuration: a strict JSON schema with defaults.

A config file is one JSON object.  Top-level keys are scalars (``command``,
``seed``, ...) or sections (``train``, ``lorenz``, ...); every key in every
section is optional and takes the documented default.  Unknown keys are
rejected so that a misspelt hyperparameter fails loudly.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

__all__ = ["ConfigError", "RunConfig", "COMMANDS", "load_config", "config_from_dict"]

COMMANDS = ("train", "baseline", "discover", "simulate", "mi")


class ConfigError(ValueError):
    """The configuration is unreadable or violates the schema."""


def _num(lo=-math.inf, hi=math.inf, lo_open=False):
    def check(v):
        ok = (v > lo if lo_open else v >= lo) and v <= hi and math.isfinite(v)
        return None if ok else f"must be {'>' if lo_open else '>='} {lo}" + (f" and <= {hi}" if hi < math.inf else "")
    return check


def _choice(*options):
    return lambda v: None if v in options else f"must be one of {', '.join(map(repr, options))}"


def _optional(check):
    return lambda v: None if v is None else check(v)


def _widths(v):
    if len(v) < 2 or not all(isinstance(w, int) and not isinstance(w, bool) and w >= 1 for w in v):
        return "must be a list of at least two positive integers"
    return None


def _vec3(v):
    if len(v) != 3 or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        return "must be a list of three numbers"
    return None


# (type, default, check); type "path" is a string naming an existing file
SCHEMA = {
    "data": {
        "csv": ("path", None, None),
        "target_column": (str, "MEDV", None),
        "test_fraction": (float, 0.2, _num(0.0, 0.99)),
        "standardize": (bool, True, None),
        "train_images": ("path", None, None),
        "train_labels": ("path", None, None),
        "test_images": ("path", None, None),
        "test_labels": ("path", None, None),
        "train_limit": (int, None, _optional(_num(1))),
        "test_limit": (int, None, _optional(_num(1))),
    },
    "network": {
        "widths": (list, [13, 32, 32, 1], _widths),
        "hidden": (str, "relu", _choice("relu", "linear")),
        "output": (str, "linear", _choice("linear", "softmax", "relu")),
    },
    "train": {
        "minibatch_size": (int, 16, _num(1)),
        "ensemble_size": (int, 100, _num(2)),
        "epochs": (int, 5, _num(0)),
        "r": (float, 0.01, _num(0.0)),
        "tolerance_mode": (str, "fixed", _choice("fixed", "adaptive")),
        "r_min": (float, 0.0, _num(0.0)),
        "adapt_kappa": (float, 1.0, _num(0.0)),
        "init_mean": (float, 0.0, _num()),
        "init_std": (float, 0.01, _num(0.0)),
        "eval_every": (int, 0, _num(0)),
        "perturb": (bool, True, None),
        "normalized": (bool, False, None),
        "compare_sgd": (bool, False, None),
    },
    "sgd": {
        "lr": (float, 0.1, _num(0.0)),
        "minibatch_size": (int, 16, _num(1)),
        "epochs": (int, 200, _num(0)),
        "init_mean": (float, 0.0, _num()),
        "init_std": (float, 0.01, _num(0.0)),
        "eval_every": (int, 0, _num(0)),
        "tail_fraction": (float, 0.1, _num(0.0, 1.0, lo_open=True)),
    },
    "lorenz": {
        "sigma": (float, 10.0, _num()),
        "rho": (float, 28.0, _num()),
        "beta": (float, 8.0 / 3.0, _num()),
        "x0": (list, [-1.1, 2.2, -2.7], _vec3),
        "dt": (float, 0.01, _num(0.0, lo_open=True)),
        "steps": (int, 3000, _num(0)),
        "integrator": (str, "rk4", _choice("rk4", "euler")),
        "derivatives": (str, "exact", _choice("exact", "central")),
    },
    "estimation": {
        "ensemble_size": (int, 100, _num(2)),
        "init_mean": (float, 0.0, _num()),
        "init_std": (float, 10.0, _num(0.0)),
        "target_variance": (float, 1e-10, _num(0.0)),
        "max_iters": (int, 200, _num(1)),
        "r": (float, 1e-5, _num(0.0)),
        "stride": (int, 1, _num(1)),
        "batch": (int, 1, _num(1)),
        "normalized": (bool, False, None),
    },
    "selection": {
        "penalty_c": (float, 0.05, _num(0.0)),
        "max_cycles": (int, 5, _num(1)),
        "prune_threshold": (float, 1e-3, _num(0.0)),
        "cycle_variance_target": (float, 1e-8, _num(0.0)),
        "rebalance_std": (float, 10.0, _num(0.0)),
        "window": (int, None, _optional(_num(3))),
        "window_start": (int, 0, _num(0)),
        "error_tolerance": (float, 1e-4, _num(0.0)),
        "max_total_iters": (int, 100, _num(1)),
    },
}

TOP_LEVEL = {
    "command": (str, None, _choice(*COMMANDS)),
    "seed": (int, 0, _num(0, 2**64 - 1)),
    "threads": (int, 1, _num(0)),
    "record_time": (bool, False, None),
    "discover_mode": (str, "structure", _choice("structure", "full")),
}


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    threads: int = 1
    record_time: bool = False
    discover_mode: str = "structure"
    sections: dict = field(default_factory=dict)

    def __getitem__(self, section):
        return self.sections[section]

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in TOP_LEVEL}
        d.update(copy.deepcopy(self.sections))
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _coerce(key, kind, value, base_dir):
    if value is None:
        return None
    if kind == "path":
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a file path string")
        p = Path(value)
        if not p.is_absolute():
            p = (base_dir / p).resolve()
        if not p.is_file():
            raise ConfigError(f"{key}: file not found: {p}")
        return str(p)
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if not isinstance(value, kind):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}")
    return copy.deepcopy(value)


def _fill(spec, given, prefix, base_dir):
    if not isinstance(given, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a JSON object")
    unknown = sorted(set(given) - set(spec))
    if unknown:
        raise ConfigError(f"{prefix}{unknown[0]}: unknown key")
    out = {}
    for key, (kind, default, check) in spec.items():
        name = prefix + key
        value = _coerce(name, kind, given.get(key, default), base_dir)
        if value is not None and check is not None:
            problem = check(value)
            if problem:
                raise ConfigError(f"{name}: {problem}, got {value!r}")
        out[key] = value
    return out


def config_from_dict(raw: dict, base_dir=".") -> RunConfig:
    """Validate a parsed config and fill defaults; paths resolve against ``base_dir``."""
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    base_dir = Path(base_dir)
    top = {k: v for k, v in raw.items() if k in TOP_LEVEL}
    rest = {k: v for k, v in raw.items() if k not in TOP_LEVEL}
    unknown = sorted(set(rest) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown key")
    if "command" not in top:
        raise ConfigError("command: required key missing")
    scalars = _fill(TOP_LEVEL, top, "", base_dir)
    sections = {name: _fill(spec, rest.get(name, {}), f"{name}.", base_dir) for name, spec in SCHEMA.items()}
    cfg = RunConfig(sections=sections, **scalars)
    _cross_check(cfg)
    return cfg


def _cross_check(cfg):
    train = cfg["train"]
    if train["tolerance_mode"] == "adaptive" and train["r_min"] > train["r"]:
        raise ConfigError("train.r_min: must not exceed train.r in adaptive mode")
    data = cfg["data"]
    if cfg.command in ("train", "baseline"):
        idx_keys = ("train_images", "train_labels", "test_images", "test_labels")
        have_idx = [data[k] is not None for k in idx_keys]
        if data["csv"] is None and not all(have_idx):
            missing = "data.csv" if not any(have_idx) else f"data.{idx_keys[have_idx.index(False)]}"
            raise ConfigError(f"{missing}: required for the {cfg.command} command")


def load_config(path) -> RunConfig:
    """Read and validate a JSON config file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return config_from_dict(raw, path.parent)
