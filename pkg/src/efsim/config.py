"""Run configuration files: flat TOML tables, strict schema.

Unknown sections or keys are rejected; every accepted value round-trips
losslessly through `to_toml_str` / `parse_config`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


class ConfigError(Exception):
    """Invalid run configuration; message names the offending key."""


_COMPRESSOR_KEYS = {
    "kind": str,
    "k": int,
    "ratio": float,
    "rank": int,
    "levels": int,
    "scaled": bool,
    "norm": str,
    "rows": int,
    "width": int,
    "width_ratio": float,
    "block_size": int,
    "shared_seed": int,
}

_SCHEMA: dict[str, dict[str, type]] = {
    "run": {
        "seed": int,
        "workers": int,
        "steps": int,
        "batch_per_worker": int,
        "eval_every": int,
    },
    "problem": {
        "kind": str,
        "n": int,
        "d": int,
        "solution_norm": float,
        "flip": float,
        "hidden": list,
        "in_dim": int,
        "classes": int,
    },
    "optimizer": {
        "algorithm": str,
        "lr": float,
        "lr_decay_steps": list,
        "lr_decay_factor": float,
        "momentum": float,
        "nesterov": bool,
        "beta": float,
        "clip_norm": float,
        "error_reset_every": int,
        "error_precision": str,
    },
    "grad_compressor": _COMPRESSOR_KEYS,
    "err_compressor": _COMPRESSOR_KEYS,
    "err2_compressor": _COMPRESSOR_KEYS,
}

_REQUIRED = {"run": ("seed",), "problem": ("kind",), "optimizer": ("algorithm",)}

_DEFAULTS = {
    "run": {"workers": 1, "steps": 100, "batch_per_worker": 1, "eval_every": 50},
    "optimizer": {"lr": 0.1},
}


@dataclass(frozen=True)
class RunConfig:
    run: dict = field(default_factory=dict)
    problem: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    grad_compressor: dict | None = None
    err_compressor: dict | None = None
    err2_compressor: dict | None = None

    def table(self, name: str) -> dict | None:
        return getattr(self, name)


def parse_config(raw: dict) -> RunConfig:
    """Validate a parsed TOML document against the schema."""
    for section in raw:
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section '{section}'")
    tables = {}
    for section, keys in _SCHEMA.items():
        sub = raw.get(section)
        if sub is None:
            if section in _REQUIRED:
                raise ConfigError(f"missing section '{section}'")
            tables[section] = None
            continue
        if not isinstance(sub, dict):
            raise ConfigError(f"section '{section}' must be a table")
        out = dict(_DEFAULTS.get(section, {}))
        for key, value in sub.items():
            if key not in keys:
                raise ConfigError(f"unknown key '{section}.{key}'")
            out[key] = _coerce(section, key, keys[key], value)
        for key in _REQUIRED.get(section, ()):
            if key not in out:
                raise ConfigError(f"missing key '{section}.{key}'")
        tables[section] = out
    return RunConfig(**tables)


def _coerce(section: str, key: str, want: type, value):
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if want is int and isinstance(value, bool):
        raise ConfigError(f"key '{section}.{key}' must be an integer")
    if not isinstance(value, want):
        raise ConfigError(
            f"key '{section}.{key}' must be {want.__name__}, got {type(value).__name__}"
        )
    if want is float and not math.isfinite(value):
        raise ConfigError(f"key '{section}.{key}' must be finite")
    if want is list:
        for item in value:
            if isinstance(item, bool) or not isinstance(item, int):
                raise ConfigError(f"key '{section}.{key}' must be a list of integers")
    return value


def load_config(path) -> RunConfig:
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"malformed config: {exc}") from None
    return parse_config(raw)


def _fmt_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        text = repr(value)
        return text if ("." in text or "e" in text) else text + ".0"
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, list):
        return "[" + ", ".join(_fmt_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize value of type {type(value).__name__}")


def to_toml_str(config: RunConfig) -> str:
    """Emit the config in schema order; parse_config inverts exactly."""
    lines = []
    for section, keys in _SCHEMA.items():
        table = config.table(section)
        if table is None:
            continue
        lines.append(f"[{section}]")
        for key in keys:
            if key in table:
                lines.append(f"{key} = {_fmt_value(table[key])}")
        lines.append("")
    return "\n".join(lines)


def save_config(config: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(to_toml_str(config))


def apply_overrides(config: RunConfig, seed: int | None = None,
                    workers: int | None = None) -> RunConfig:
    run = dict(config.run)
    if seed is not None:
        run["seed"] = seed
    if workers is not None:
        run["workers"] = workers
    return RunConfig(run, config.problem, config.optimizer,
                     config.grad_compressor, config.err_compressor,
                     config.err2_compressor)


def apply_dotted(config: RunConfig, overrides: dict) -> RunConfig:
    """Set '<section>.<key>' paths (sweep grids)."""
    tables = {s: (dict(config.table(s)) if config.table(s) is not None else None)
              for s in _SCHEMA}
    for path, value in overrides.items():
        try:
            section, key = path.split(".", 1)
        except ValueError:
            raise ConfigError(f"bad override path '{path}'") from None
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ConfigError(f"unknown override '{path}'")
        if tables[section] is None:
            tables[section] = {}
        tables[section][key] = _coerce(section, key, _SCHEMA[section][key], value)
    return parse_config(
        {s: t for s, t in tables.items() if t is not None}
    )
