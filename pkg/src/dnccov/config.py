"""Flat, sectioned key-value run configuration.

Example::

    [run]
    seed = 1

    [data]
    p = 20
    k = 2
    n = 50

Every section and key is checked against :data:`SCHEMA`.  Unknown names are
rejected together, and each command states which keys it requires.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    """Malformed, incomplete or unrecognised configuration."""


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_float(text: str):
    return None if text.strip().lower() in ("", "none") else float(text)


def _optional_int(text: str):
    return None if text.strip().lower() in ("", "none") else int(text)


def _int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def _float_list(text: str) -> list[float]:
    return [float(part) for part in text.split(",") if part.strip()]


# section -> key -> parser
SCHEMA = {
    "run": {"seed": int},
    "data": {"p": int, "k": int, "n": int, "s": _optional_int, "sigma2": float},
    "fit": {
        "g": int,
        "k": int,
        "k_g": _optional_int,
        "sweep_count": int,
        "burn_in": int,
        "thin": int,
        "rho_grid_size": int,
        "rho_init": float,
        "rho_fixed": _optional_float,
        "materialize_sigma": _bool,
        "budget_seconds": _optional_float,
    },
    "prior": {"nu": float, "a1": float, "a2": float, "a_sigma": float, "b_sigma": float},
    "bench": {
        "p": _int_list,
        "k": _int_list,
        "n": _int_list,
        "g": _int_list,
        "s": _optional_int,
        "sigma2": float,
        "replicates": int,
        "budget_seconds": _optional_float,
        "threads": int,
    },
    "trace": {"p": int, "k": int, "s": int, "groups": int, "epsilons": _float_list, "n_draws": int},
}


@dataclass
class Config:
    """Parsed configuration: ``values[section][key]`` plus the raw text for echoing."""

    values: dict
    source: str

    def section(self, name: str) -> dict:
        return dict(self.values.get(name, {}))

    def require(self, section: str, *keys: str) -> None:
        have = self.values.get(section, {})
        missing = [f"{section}.{key}" for key in keys if key not in have]
        if missing:
            raise ConfigError(f"missing required key(s): {', '.join(missing)}")

    @property
    def seed(self) -> int:
        self.require("run", "seed")
        return self.values["run"]["seed"]

    def echo(self) -> dict:
        return {sec: dict(keys) for sec, keys in self.values.items()}


def parse_config(text: str) -> Config:
    """Parse config text; raises :class:`ConfigError` naming every bad entry."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc

    unknown = []
    for sec in parser.sections():
        if sec not in SCHEMA:
            unknown.append(f"[{sec}]")
            continue
        unknown.extend(f"{sec}.{key}" for key in parser[sec] if key not in SCHEMA[sec])
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")

    values: dict = {}
    for sec in parser.sections():
        values[sec] = {}
        for key, raw in parser[sec].items():
            try:
                values[sec][key] = SCHEMA[sec][key](raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {sec}.{key}: {raw!r} ({exc})") from exc
    return Config(values, text)


def load_config(path) -> Config:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
