"""
Configuration module for netflow runs.
Process settings come from the environment (a .env file is loaded if present);
run parameters come from a flat key=value file plus command-line overrides.
"""

import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from dotenv import dotenv_values, load_dotenv

from .errors import ConfigError

# Load environment variables
load_dotenv()


def _int_env(name, default):
    raw = os.environ.get(name)
    try:
        return max(1, int(raw)) if raw else default
    except ValueError:
        return default


LOG_LEVEL = os.environ.get("LOG_LEVEL", "INFO").upper()
NETFLOW_THREADS = _int_env("NETFLOW_THREADS", os.cpu_count() or 1)  # caps internal parallelism
NETFLOW_OUTPUT = os.environ.get("NETFLOW_OUTPUT", "runs")

COMMANDS = (
    "discrete",
    "verify",
    "flow",
    "steady1d",
    "steady-plap",
    "steady-penalized",
    "converge",
)
SOURCES = ("dipole", "cosine", "sine-flux")


@dataclass(frozen=True)
class RunConfig:
    command: str
    nx: int = 8
    ny: int = 8
    mesh: str | None = None
    r: float = 1.0
    c2: float = 1.0
    D: float = 0.0
    gamma: float = 2.0
    dt: float = 1e-2
    t_end: float = 1.0
    eps: tuple = (1e-1, 1e-2, 1e-3)
    levels: int = 4
    seed: int = 12345
    instances: int = 5
    output: str = field(default_factory=lambda: NETFLOW_OUTPUT)
    psd_tol: float = 1e-10
    c_omega: float = 1.0 / (2.0 * math.pi**2)
    n_points: int = 1024
    source: str = "dipole"
    snapshot_every: int = 10

    @property
    def c(self) -> float:
        return math.sqrt(self.c2)

    def as_dict(self) -> dict:
        data = asdict(self)
        data["eps"] = list(self.eps)
        return data


_TYPES = {f.name: f.type for f in fields(RunConfig)}

# (predicate, message) per key
_CONSTRAINTS = {
    "nx": (lambda v: v >= 1, "nx must be at least 1"),
    "ny": (lambda v: v >= 1, "ny must be at least 1"),
    "r": (lambda v: v > 0, "r must be positive"),
    "c2": (lambda v: v > 0, "c2 must be positive"),
    "D": (lambda v: v >= 0, "D must be nonnegative"),
    "gamma": (lambda v: v > 0, "gamma must be positive"),
    "dt": (lambda v: v > 0, "dt must be positive"),
    "t_end": (lambda v: v >= 0, "t_end must be nonnegative"),
    "eps": (lambda v: len(v) > 0 and all(e > 0 for e in v), "eps values must be positive"),
    "levels": (lambda v: v >= 1, "levels must be at least 1"),
    "instances": (lambda v: v >= 1, "instances must be at least 1"),
    "psd_tol": (lambda v: v >= 0, "psd_tol must be nonnegative"),
    "c_omega": (lambda v: v >= 0, "c_omega must be nonnegative"),
    "n_points": (lambda v: v >= 1, "n_points must be at least 1"),
    "snapshot_every": (lambda v: v >= 0, "snapshot_every must be nonnegative"),
    "command": (lambda v: v in COMMANDS, f"command must be one of {', '.join(COMMANDS)}"),
    "source": (lambda v: v in SOURCES, f"source must be one of {', '.join(SOURCES)}"),
    "mesh": (lambda v: v is None or Path(v).is_file(), "mesh file does not exist"),
}


_EXPECTED = {int: "an integer", float: "a number", tuple: "a comma-separated list of numbers"}


def _convert(key, raw):
    kind = _TYPES[key]
    if raw is None:
        raise ConfigError(f"{key} has no value")
    raw = str(raw).strip()
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(float(part) for part in raw.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"{key} must be {_EXPECTED[kind]}, got {raw!r}") from None
    if key == "mesh":
        return raw or None
    return raw


def parse_overrides(items):
    values = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"expected key=value, got {item!r}")
        values[key.strip()] = value
    return values


def parse_config(path=None, overrides=None):
    """Build a validated RunConfig from a key=value file and overrides.

    `overrides` is a mapping or a list of "key=value" strings and wins over
    the file.
    """
    values = {}
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file {path} does not exist")
        values.update(dotenv_values(path))
    if isinstance(overrides, dict):
        values.update({k: v for k, v in overrides.items()})
    else:
        values.update(parse_overrides(overrides))

    unknown = sorted(set(values) - set(_TYPES))
    if unknown:
        raise ConfigError(f"unknown key '{unknown[0]}'")
    if not values.get("command"):
        raise ConfigError("command is required")

    parsed = {key: _convert(key, raw) for key, raw in values.items()}
    for key, value in parsed.items():
        check, message = _CONSTRAINTS.get(key, (None, None))
        if check is not None and not check(value):
            raise ConfigError(message)
    return RunConfig(**parsed)
