"""Run configuration: hyperparameter table, validation and echo."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError, OutOfRange, UnknownKey
from .objective import PenaltyConfig

__all__ = ["RunConfig", "Paths", "validate_config", "load_config"]


@dataclass
class Paths:
    mesh: str | None = None
    pb_mesh: str | None = None
    sensors: str | None = None
    test_sensors: str | None = None
    snapshots: str | None = None
    test_snapshots: str | None = None
    points: str | None = None
    curves: str | None = None
    state: str | None = None
    output_dir: str | None = None


@dataclass
class RunConfig:
    kappa: int = 4
    sigma_beta: float = 10.0
    kappa_msh: float = 10.0
    eps: float = 0.1
    c_exp: float = 0.025
    xi: float = 1.0
    use_jac: bool = True
    use_msh: bool = True
    use_pen: bool = True
    n0: int = 1
    n_max: int = 6
    tol: float = 1e-4
    tol_pod: float = 5e-3
    c_inf: float = 10.0
    r_min: float = 0.70
    split: float = 0.8
    delta: float = 1e-6
    seed: int = 0
    gtol: float = 1e-7
    max_iter: int = 200
    angle_tol: float = 1e-6
    rom_sizes: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    paths: Paths = field(default_factory=Paths)

    def penalty(self) -> PenaltyConfig:
        return PenaltyConfig(self.eps, self.c_exp, self.kappa_msh, self.xi, self.use_jac, self.use_msh, self.use_pen)

    def to_json(self) -> dict:
        return asdict(self)


# (predicate, message) per numeric field
_RULES = {
    "kappa": (lambda v: 1 <= v <= 12, "must lie in [1, 12]"),
    "sigma_beta": (lambda v: v > 0, "must be positive"),
    "kappa_msh": (lambda v: v > 0, "must be positive"),
    "eps": (lambda v: v > 0, "must be positive"),
    "c_exp": (lambda v: v > 0, "must be positive"),
    "xi": (lambda v: v >= 0, "must be nonnegative"),
    "n0": (lambda v: v == 1, "only a single initial template is supported"),
    "n_max": (lambda v: v >= 1, "must be at least 1"),
    "tol": (lambda v: v > 0, "must be positive"),
    "tol_pod": (lambda v: 0 <= v < 1, "must lie in [0, 1)"),
    "c_inf": (lambda v: v > 0, "must be positive"),
    "r_min": (lambda v: v <= 1, "must not exceed 1"),
    "split": (lambda v: 0 < v <= 1, "must lie in (0, 1]"),
    "delta": (lambda v: v > 0, "must be positive"),
    "seed": (lambda v: v >= 0, "must be nonnegative"),
    "gtol": (lambda v: v > 0, "must be positive"),
    "max_iter": (lambda v: v >= 1, "must be at least 1"),
    "angle_tol": (lambda v: v > 0, "must be positive"),
}


def _check_type(name, value, kind):
    if kind is bool:
        if not isinstance(value, bool):
            raise OutOfRange(name, "must be a boolean")
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise OutOfRange(name, "must be a number")
    if kind is int:
        if isinstance(value, float) and not value.is_integer():
            raise OutOfRange(name, "must be an integer")
        return int(value)
    if not math.isfinite(value):
        raise OutOfRange(name, "must be finite")
    return float(value)


def validate_config(data: dict) -> RunConfig:
    """Validate a parsed JSON object and fill in defaults.

    Raises
    ------
    UnknownKey
        For keys outside the table (nested keys reported as ``paths.key``).
    OutOfRange
        For values violating their range, with the field path.
    """
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    known = {f.name: f for f in fields(RunConfig)}
    kinds = {"kappa": int, "n0": int, "n_max": int, "seed": int, "max_iter": int,
             "use_jac": bool, "use_msh": bool, "use_pen": bool}
    cfg = RunConfig()
    for key, value in data.items():
        if key not in known:
            raise UnknownKey(key)
        if key == "paths":
            cfg.paths = _paths(value)
        elif key == "rom_sizes":
            if not isinstance(value, list) or not value:
                raise OutOfRange(key, "must be a nonempty list")
            cfg.rom_sizes = [_check_type(f"rom_sizes[{i}]", v, int) for i, v in enumerate(value)]
            if min(cfg.rom_sizes) < 1:
                raise OutOfRange(key, "sizes must be at least 1")
        else:
            v = _check_type(key, value, kinds.get(key, float))
            rule = _RULES.get(key)
            if rule and not rule[0](v):
                raise OutOfRange(key, rule[1])
            setattr(cfg, key, v)
    if not cfg.c_exp < cfg.eps:
        raise OutOfRange("c_exp", "must be smaller than eps")
    if cfg.n0 > cfg.n_max:
        raise OutOfRange("n0", "must not exceed n_max")
    return cfg


def _paths(value) -> Paths:
    if not isinstance(value, dict):
        raise OutOfRange("paths", "must be an object")
    names = {f.name for f in fields(Paths)}
    out = Paths()
    for k, v in value.items():
        if k not in names:
            raise UnknownKey(f"paths.{k}")
        if v is not None and not isinstance(v, str):
            raise OutOfRange(f"paths.{k}", "must be a string")
        setattr(out, k, v)
    return out


def load_config(path) -> RunConfig:
    """Read and validate a JSON configuration file (``None`` gives defaults)."""
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    return validate_config(data)
