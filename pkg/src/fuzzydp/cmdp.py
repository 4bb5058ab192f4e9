"""Tabular constrained MDPs, the double-integrator discretization, and the
plain-text CMDP file format.

File format (``#`` starts a comment, blank lines ignored)::

    META
    n_states = 2
    n_actions = 2
    gamma = 0.9
    budget = 0.5
    GRID                  # optional; absent means a 1-D line of state indices
    lows = -2.5 -2.5
    highs = 2.5 2.5
    cells = 51 51
    P0                    # state action next:prob [next:prob ...]
    0 0 0:1.0
    ...
    R                     # state, then one reward per action
    0 1.0 0.0
    C                     # state, then one cost per action
    0 0.0 1.0
    D0                    # initial distribution, one value per state
    1.0 0.0
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .errors import ActionOutOfRange, InvalidGrid, InvariantViolation, ParseError

ROW_TOL = 1e-9
POSITION_GAIN = 0.005
SAFE_LIMIT = 2.0


class StateVector(NamedTuple):
    x: float
    v: float


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned grid of cells; each cell is represented by its center.

    ``n_actions`` evenly spaced scalar actions cover ``[-1, 1]``.
    """

    lows: tuple
    highs: tuple
    cells: tuple
    n_actions: int = 11

    def __post_init__(self):
        lows = tuple(float(x) for x in np.atleast_1d(self.lows))
        highs = tuple(float(x) for x in np.atleast_1d(self.highs))
        cells = tuple(int(x) for x in np.atleast_1d(self.cells))
        object.__setattr__(self, "lows", lows)
        object.__setattr__(self, "highs", highs)
        object.__setattr__(self, "cells", cells)
        if not (len(lows) == len(highs) == len(cells)) or not lows:
            raise InvalidGrid("lows, highs and cells must have the same nonzero length")
        for lo, hi, n in zip(lows, highs, cells):
            if not lo < hi:
                raise InvalidGrid(f"bounds must be strictly ordered, got [{lo}, {hi}]")
            if n < 2:
                raise InvalidGrid(f"need at least 2 cells per dimension, got {n}")
        if self.n_actions < 1:
            raise InvalidGrid("need at least one action")

    @property
    def dim(self) -> int:
        return len(self.cells)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.cells))

    @property
    def widths(self) -> np.ndarray:
        return (np.array(self.highs) - np.array(self.lows)) / np.array(self.cells)

    @property
    def actions(self) -> np.ndarray:
        if self.n_actions == 1:
            return np.zeros(1)
        return np.linspace(-1.0, 1.0, self.n_actions)

    def centers(self) -> np.ndarray:
        """Cell centers, shape (n_cells, dim), C order (last axis fastest)."""
        axes = [lo + (np.arange(n) + 0.5) * w for lo, n, w in zip(self.lows, self.cells, self.widths)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([a.ravel() for a in mesh], axis=-1)

    def clip(self, points) -> np.ndarray:
        return np.clip(np.asarray(points, dtype=float), self.lows, self.highs)

    def snap(self, points) -> np.ndarray:
        """Flat index of the cell containing each point, after clipping to bounds."""
        pts = self.clip(points)
        idx = np.floor((pts - np.array(self.lows)) / self.widths).astype(np.int64)
        idx = np.clip(idx, 0, np.array(self.cells) - 1)
        return np.ravel_multi_index(tuple(np.moveaxis(idx, -1, 0)), self.cells)

    def cell_bounds(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        multi = np.array(np.unravel_index(int(index), self.cells))
        lo = np.array(self.lows) + multi * self.widths
        return lo, lo + self.widths


@dataclass(frozen=True)
class IndexLine:
    """States placed on a line at their own indices (default geometry)."""

    n_states: int
    dim: int = 1

    def centers(self) -> np.ndarray:
        return np.arange(self.n_states, dtype=float)[:, None]

    def snap(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)[..., 0]
        return np.clip(np.floor(pts + 0.5), 0, self.n_states - 1).astype(np.int64)


@dataclass(frozen=True, eq=False)
class TabularCMDP:
    """Finite constrained MDP.

    ``p0`` is stored as a sparse matrix of shape ``(S*A, S)``; row
    ``s*A + a`` is the nominal next-state distribution of ``(s, a)``.  A
    dense ``(S, A, S)`` array is accepted and converted.  ``grid`` embeds the
    states in a continuous space for perturbation sampling; without one,
    states sit on a line at their own indices.
    """

    n_states: int
    n_actions: int
    p0: sp.csr_matrix
    r: np.ndarray
    c: np.ndarray
    gamma: float
    d0: np.ndarray
    budget: float = math.inf
    grid: GridSpec | None = None
    actions: np.ndarray | None = field(default=None)

    def __post_init__(self):
        S, A = int(self.n_states), int(self.n_actions)
        p0 = self.p0
        if not sp.issparse(p0):
            p0 = np.asarray(p0, dtype=float).reshape(S * A, S)
        p0 = sp.csr_matrix(p0, dtype=float)
        p0.sort_indices()
        object.__setattr__(self, "p0", p0)
        for name in ("r", "c"):
            arr = np.array(getattr(self, name), dtype=float).reshape(S, A)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        d0 = np.array(self.d0, dtype=float).reshape(S)
        d0.setflags(write=False)
        object.__setattr__(self, "d0", d0)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "budget", float(self.budget))
        if self.p0.shape != (S * A, S):
            raise ValueError(f"p0 has shape {self.p0.shape}, expected {(S * A, S)}")

    @property
    def geometry(self) -> GridSpec | IndexLine:
        return self.grid if self.grid is not None else IndexLine(self.n_states)

    def p0_dense(self) -> np.ndarray:
        return self.p0.toarray().reshape(self.n_states, self.n_actions, self.n_states)

    def with_budget(self, budget: float) -> "TabularCMDP":
        return TabularCMDP(self.n_states, self.n_actions, self.p0, self.r, self.c, self.gamma,
                           self.d0, budget, self.grid, self.actions)

    def with_gamma(self, gamma: float) -> "TabularCMDP":
        return TabularCMDP(self.n_states, self.n_actions, self.p0, self.r, self.c, gamma,
                           self.d0, self.budget, self.grid, self.actions)

    def check(self) -> "TabularCMDP":
        report = validate(self)
        if report:
            raise InvariantViolation(report)
        return self


def validate(cmdp: TabularCMDP) -> list[str]:
    """Every violated invariant, each naming its location; empty when valid."""
    report = []
    S, A = cmdp.n_states, cmdp.n_actions
    p0 = cmdp.p0
    sums = np.asarray(p0.sum(axis=1)).ravel()
    negative = np.zeros(S * A, dtype=bool)
    if p0.nnz:
        neg_rows = np.repeat(np.arange(S * A), np.diff(p0.indptr))[p0.data < 0]
        negative[neg_rows] = True
    for row in range(S * A):
        s, a = divmod(row, A)
        if negative[row]:
            report.append(f"P0 (state {s}, action {a}): negative probability")
        if not abs(sums[row] - 1.0) <= ROW_TOL:
            report.append(f"P0 (state {s}, action {a}): row sums to {sums[row]!r}, expected 1")
    if not np.all(np.isfinite(cmdp.r)):
        s, a = np.argwhere(~np.isfinite(cmdp.r))[0]
        report.append(f"R (state {s}, action {a}): not finite")
    if not np.all(np.isfinite(cmdp.c)):
        s, a = np.argwhere(~np.isfinite(cmdp.c))[0]
        report.append(f"C (state {s}, action {a}): not finite")
    elif np.any(cmdp.c < 0):
        s, a = np.argwhere(cmdp.c < 0)[0]
        report.append(f"C (state {s}, action {a}): negative cost")
    if np.any(cmdp.d0 < 0) or not abs(math.fsum(cmdp.d0) - 1.0) <= ROW_TOL:
        report.append(f"D0: must be nonnegative and sum to 1, sums to {math.fsum(cmdp.d0)!r}")
    if not 0.0 <= cmdp.gamma < 1.0:
        report.append(f"gamma: {cmdp.gamma!r} is outside [0, 1)")
    if not cmdp.budget >= 0.0:
        report.append(f"budget: {cmdp.budget!r} is negative")
    if cmdp.grid is not None and cmdp.grid.n_cells != S:
        report.append(f"GRID: {cmdp.grid.n_cells} cells for {S} states")
    return report


# -- double integrator ------------------------------------------------------


def _check_action(a):
    a = np.asarray(a, dtype=float)
    if np.any(~np.isfinite(a)) or np.any(np.abs(a) > 1.0 + 1e-12):
        raise ActionOutOfRange(f"action {a} outside [-1, 1]")
    return a


def di_step(s, a, mode: str = "position-gain", dt: float = 0.05):
    """One step of the double integrator.

    ``mode="position-gain"`` applies the update ``x += 0.005*a`` with the
    velocity unchanged; ``mode="standard"`` is the Euler double integrator
    ``x += dt*v, v += dt*a``.  Works on a single state or on arrays whose
    last axis is ``(x, v)``.
    """
    a = _check_action(a)
    arr = np.asarray(s, dtype=float)
    x, v = arr[..., 0], arr[..., 1]
    if mode == "position-gain":
        nx, nv = x + POSITION_GAIN * a, v + 0.0 * a
    elif mode == "standard":
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        nx, nv = x + dt * v, v + dt * a
    else:
        raise ValueError(f"unknown dynamics mode {mode!r}")
    if arr.ndim == 1 and np.ndim(a) == 0:
        return StateVector(float(nx), float(nv))
    return np.stack(np.broadcast_arrays(nx, nv), axis=-1)


def di_reward(s):
    """Sum of the four clipped quadratic reward bumps."""
    arr = np.asarray(s, dtype=float)
    x, v = arr[..., 0], arr[..., 1]
    r = (np.maximum(4 - (2 * (x - 1.5) ** 2 + 2 * (v + 1.5) ** 2), 0)
         + np.maximum(5 - (3 * (x + 2.2) ** 2 + 3 * (v + 2.2) ** 2), 0)
         + np.maximum(5 - (3 * (x - 2.2) ** 2 + 3 * (v - 2.2) ** 2), 0)
         + np.maximum(4 - (2 * (x + 1.5) ** 2 + 2 * (v - 1.5) ** 2), 0))
    return float(r) if np.ndim(r) == 0 else r


def di_cost(s):
    """1.0 outside the closed safe box ``|x| <= 2, |v| <= 2``, else 0.0."""
    arr = np.asarray(s, dtype=float)
    unsafe = (np.abs(arr[..., 0]) > SAFE_LIMIT) | (np.abs(arr[..., 1]) > SAFE_LIMIT)
    out = unsafe.astype(float)
    return float(out) if np.ndim(out) == 0 else out


DEFAULT_GRID = GridSpec((-2.5, -2.5), (2.5, 2.5), (51, 51), 11)


def build_double_integrator(grid: GridSpec = DEFAULT_GRID, mode: str = "position-gain", dt: float = 0.05,
                            gamma: float = 0.99, budget: float = math.inf) -> TabularCMDP:
    """Deterministic tabular model of the double integrator on ``grid``.

    Each (cell center, action) moves with probability 1 to the cell
    containing the clipped successor; reward and cost are evaluated at the
    continuous successor before clipping.  The initial distribution is a
    point mass on the cell containing the origin.
    """
    if grid.dim != 2:
        raise InvalidGrid(f"double integrator needs a 2-D grid, got {grid.dim}-D")
    if any(lo > -2.5 for lo in grid.lows) or any(hi < 2.5 for hi in grid.highs):
        raise InvalidGrid("grid bounds must cover [-2.5, 2.5]^2")
    centers = grid.centers()
    actions = grid.actions
    S, A = grid.n_cells, len(actions)
    nxt = di_step(centers[:, None, :], actions[None, :], mode=mode, dt=dt)
    r = di_reward(nxt)
    c = di_cost(nxt)
    succ = grid.snap(nxt).ravel()
    p0 = sp.csr_matrix((np.ones(S * A), (np.arange(S * A), succ)), shape=(S * A, S))
    d0 = np.zeros(S)
    d0[grid.snap(np.zeros(2))] = 1.0
    return TabularCMDP(S, A, p0, r, c, gamma, d0, budget, grid, actions)


# -- file format ------------------------------------------------------------

SECTIONS = ("META", "GRID", "P0", "R", "C", "D0")
META_KEYS = ("n_states", "n_actions", "gamma", "budget")
GRID_KEYS = ("lows", "highs", "cells")


def _fmt(x: float) -> str:
    return repr(float(x))


def dumps(cmdp: TabularCMDP) -> str:
    """Canonical text form; ``loads(dumps(m))`` reproduces every table exactly."""
    S, A = cmdp.n_states, cmdp.n_actions
    lines = ["# fuzzydp CMDP", "META", f"n_states = {S}", f"n_actions = {A}",
             f"gamma = {_fmt(cmdp.gamma)}", f"budget = {_fmt(cmdp.budget)}"]
    if cmdp.grid is not None:
        g = cmdp.grid
        lines += ["GRID", "lows = " + " ".join(map(_fmt, g.lows)),
                  "highs = " + " ".join(map(_fmt, g.highs)),
                  "cells = " + " ".join(str(n) for n in g.cells)]
    lines.append("P0")
    p0 = cmdp.p0
    for row in range(S * A):
        s, a = divmod(row, A)
        lo, hi = p0.indptr[row], p0.indptr[row + 1]
        entries = " ".join(f"{j}:{_fmt(p)}" for j, p in zip(p0.indices[lo:hi], p0.data[lo:hi]))
        lines.append(f"{s} {a} {entries}".rstrip())
    for name, table in (("R", cmdp.r), ("C", cmdp.c)):
        lines.append(name)
        lines += [f"{s} " + " ".join(map(_fmt, table[s])) for s in range(S)]
    lines += ["D0", " ".join(map(_fmt, cmdp.d0))]
    return "\n".join(lines) + "\n"


def write_cmdp(cmdp: TabularCMDP, path) -> None:
    Path(path).write_text(dumps(cmdp), encoding="utf-8")


def _float(token: str, lineno: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise ParseError(f"not a number: {token!r}", lineno) from None


def _int(token: str, lineno: int) -> int:
    try:
        return int(token)
    except ValueError:
        raise ParseError(f"not an integer: {token!r}", lineno) from None


def loads(text: str, check: bool = True) -> TabularCMDP:
    """Parse the text format; raises InvariantViolation on invalid tables when ``check``."""
    section = None
    meta, grid = {}, {}
    p_rows, p_cols, p_vals = [], [], []
    seen_pairs = set()
    tables = {"R": {}, "C": {}}
    d0 = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line in SECTIONS:
            section = line
            continue
        if section is None:
            raise ParseError(f"data before any section header: {line!r}", lineno)
        if section in ("META", "GRID"):
            if "=" not in line:
                raise ParseError(f"expected 'key = value', got {line!r}", lineno)
            key, value = (part.strip() for part in line.split("=", 1))
            allowed = META_KEYS if section == "META" else GRID_KEYS
            if key not in allowed:
                raise ParseError(f"unknown {section} key {key!r}", lineno)
            if key in ("n_states", "n_actions"):
                _int(value, lineno)
            (meta if section == "META" else grid)[key] = (value, lineno)
            continue
        if "n_states" not in meta or "n_actions" not in meta:
            raise ParseError("META must define n_states and n_actions before tables", lineno)
        S = _int(meta["n_states"][0], meta["n_states"][1])
        A = _int(meta["n_actions"][0], meta["n_actions"][1])
        tokens = line.split()
        if section == "P0":
            if len(tokens) < 2:
                raise ParseError("P0 row needs 'state action next:prob ...'", lineno)
            s, a = _int(tokens[0], lineno), _int(tokens[1], lineno)
            if not (0 <= s < S and 0 <= a < A):
                raise ParseError(f"state/action ({s}, {a}) out of range", lineno)
            if (s, a) in seen_pairs:
                raise ParseError(f"duplicate P0 row for (state {s}, action {a})", lineno)
            seen_pairs.add((s, a))
            for tok in tokens[2:]:
                if ":" not in tok:
                    raise ParseError(f"expected next:prob, got {tok!r}", lineno)
                j, p = tok.split(":", 1)
                j = _int(j, lineno)
                if not 0 <= j < S:
                    raise ParseError(f"next state {j} out of range", lineno)
                p_rows.append(s * A + a)
                p_cols.append(j)
                p_vals.append(_float(p, lineno))
        elif section in ("R", "C"):
            if len(tokens) != A + 1:
                raise ParseError(f"{section} row needs a state and {A} values", lineno)
            s = _int(tokens[0], lineno)
            if not 0 <= s < S:
                raise ParseError(f"state {s} out of range", lineno)
            tables[section][s] = [_float(t, lineno) for t in tokens[1:]]
        elif section == "D0":
            if d0 is not None or len(tokens) != S:
                raise ParseError(f"D0 must be a single row of {S} values", lineno)
            d0 = [_float(t, lineno) for t in tokens]
    for key in ("n_states", "n_actions", "gamma"):
        if key not in meta:
            raise ParseError(f"META is missing {key}")
    S = _int(*meta["n_states"])
    A = _int(*meta["n_actions"])
    for name in ("R", "C"):
        missing = sorted(set(range(S)) - set(tables[name]))
        if missing:
            raise ParseError(f"{name} has no row for state {missing[0]}")
    if d0 is None:
        raise ParseError("missing D0 section")
    grid_spec = None
    if grid:
        try:
            grid_spec = GridSpec(tuple(_float(t, grid["lows"][1]) for t in grid["lows"][0].split()),
                            tuple(_float(t, grid["highs"][1]) for t in grid["highs"][0].split()),
                            tuple(_int(t, grid["cells"][1]) for t in grid["cells"][0].split()),
                            A)
        except KeyError as exc:
            raise ParseError(f"GRID is missing {exc.args[0]}") from None
    p0 = sp.coo_matrix((p_vals, (p_rows, p_cols)), shape=(S * A, S)).tocsr()
    cmdp = TabularCMDP(
        S, A, p0,
        np.array([tables["R"][s] for s in range(S)]),
        np.array([tables["C"][s] for s in range(S)]),
        _float(*meta["gamma"]),
        np.array(d0),
        _float(*meta["budget"]) if "budget" in meta else math.inf,
        grid_spec,
        grid_spec.actions if grid_spec is not None else None,
    )
    if check:
        cmdp.check()
    return cmdp


def load_cmdp(path, check: bool = True) -> TabularCMDP:
    return loads(Path(path).read_text(encoding="utf-8"), check=check)
