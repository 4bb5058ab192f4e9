"""Run configuration: ``key = value`` files layered under command-line flags.

Precedence, lowest first: built-in defaults, per-command defaults
(:data:`COMMAND_DEFAULTS`), the config file, explicit flags.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

from .errors import ParseError


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _opt_float(text: str):
    text = text.strip()
    return None if text.lower() in ("", "none", "default") else float(text)


@dataclass(frozen=True)
class RunConfig:
    # environment
    env: str = "double-integrator"
    cmdp_file: str = ""
    kernels_file: str = ""
    grid_lows: tuple = (-2.5, -2.5)
    grid_highs: tuple = (2.5, 2.5)
    grid_cells: tuple = (51, 51)
    n_actions: int = 11
    dynamics: str = "position-gain"
    dt: float = 0.05
    gamma: float | None = None
    budget: float | None = None
    # operator and uncertainty levels
    operator: str = "fuzzy"
    K: int = 10
    eps_base: float = 0.1
    M: int = 5
    seed: int = 0
    densities: tuple = ()
    density_sum: float = 0.5
    density_mode: str = "tabular"
    uncertainty_set: str = "family"
    # solvers
    tol: float = 1e-8
    max_iter: int = 10000
    alpha: float = 0.05
    iters: int = 30
    sweeps_per_iter: int = 50
    fuzzy_every: int = 5
    lr: float = 0.1
    train_episodes: int = 20
    train_horizon: int = 50
    # demo
    penalty: float = 10.0
    test_level: float = 4.0
    episodes: int = 100
    horizon: int = 150
    ablation_K: tuple = (1, 5, 15, 25)
    seeds: tuple = (0,)
    # output
    out: str = "out"
    threads: int = 1

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


PARSERS = {
    "grid_lows": _floats, "grid_highs": _floats, "grid_cells": _ints, "densities": _floats,
    "ablation_K": _ints, "seeds": _ints, "gamma": _opt_float, "budget": _opt_float,
}
for _f in dataclasses.fields(RunConfig):
    if _f.name not in PARSERS:
        PARSERS[_f.name] = {int: int, float: float, str: str}[type(_f.default)]

CHOICES = {
    "env": ("double-integrator", "file"),
    "dynamics": ("position-gain", "standard"),
    "operator": ("fuzzy", "minmax", "nominal"),
    "density_mode": ("tabular", "network"),
    "uncertainty_set": ("family", "core"),
}

DEMO_DEFAULTS = dict(eps_base=0.01, dt=0.1, gamma=0.97, dynamics="standard", tol=1e-4, max_iter=3000)
COMMAND_DEFAULTS = {
    "demo-di": DEMO_DEFAULTS,
    "ablation": dict(DEMO_DEFAULTS, seeds=(0, 1, 2, 3, 4)),
}


def parse_value(key: str, text: str):
    if key not in PARSERS:
        raise KeyError(key)
    value = PARSERS[key](text.strip())
    if key in CHOICES and value not in CHOICES[key]:
        raise ValueError(f"{key} must be one of {CHOICES[key]}, got {value!r}")
    return value


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ParseError(f"expected 'key = value', got {line!r}", lineno)
        if key in values:
            raise ParseError(f"duplicate key {key!r}", lineno)
        try:
            values[key] = parse_value(key, value)
        except KeyError:
            raise ParseError(f"unknown key {key!r}", lineno) from None
        except ValueError as exc:
            raise ParseError(f"{key}: {exc}", lineno) from None
    return values


def load_config(path) -> dict:
    return parse_config_text(Path(path).read_text())


def build_config(command: str, file_values: dict | None = None, flag_values: dict | None = None) -> RunConfig:
    values = dict(COMMAND_DEFAULTS.get(command, {}))
    values.update(file_values or {})
    values.update(flag_values or {})
    cfg = RunConfig(**values)
    check(cfg)
    return cfg


def check(cfg: RunConfig) -> None:
    """Range checks that do not depend on other modules."""
    problems = []
    for key in ("K", "M", "max_iter", "iters", "sweeps_per_iter", "fuzzy_every", "episodes",
                "horizon", "train_episodes", "train_horizon", "threads", "n_actions"):
        if getattr(cfg, key) < 1:
            problems.append(f"{key} must be >= 1")
    for key in ("tol", "alpha", "lr", "dt"):
        if not getattr(cfg, key) > 0:
            problems.append(f"{key} must be positive")
    if cfg.eps_base < 0 or cfg.test_level < 0:
        problems.append("eps_base and test_level must be >= 0")
    if cfg.gamma is not None and not 0 <= cfg.gamma < 1:
        problems.append("gamma must lie in [0, 1)")
    if cfg.budget is not None and math.isnan(cfg.budget):
        problems.append("budget must not be NaN")
    if cfg.env == "file" and not cfg.cmdp_file:
        problems.append("env = file needs cmdp_file")
    if problems:
        raise ValueError("; ".join(problems))
