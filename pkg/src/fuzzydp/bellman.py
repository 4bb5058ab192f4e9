"""Fuzzy, dual-fuzzy, min-max and nominal Bellman backups, and value iteration.

A backup turns a value table ``V`` (one entry per state) into

    F(V)(s) = sum_a pi(a|s) * (signal(s, a) + gamma * agg_s(levels of V after (s, a)))

where the level values of ``(s, a)`` average ``V`` over the perturbed
samples of each nominal successor, and ``agg_s`` is the Choquet integral
against the measure of state ``s`` (fuzzy), its dual (dual-fuzzy), the
smallest or largest level (min-max), or plain expectation (nominal).  With
``policy=None`` the backup is greedy over actions instead.

Sweeps are synchronous: every state is backed up from the same previous
table.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .choquet import choquet_rows, dual_choquet_rows
from .cmdp import TabularCMDP
from .errors import DimensionMismatch, NonFinite
from .measure import FuzzyMeasure, MeasureField
from .uncertainty import UncertaintyLevels, level_value_table, perturbation_indices

KINDS = ("fuzzy", "dual-fuzzy", "minmax", "nominal")


def _signal_table(cmdp: TabularCMDP, signal) -> np.ndarray:
    if isinstance(signal, str):
        if signal == "reward":
            return cmdp.r
        if signal == "cost":
            return cmdp.c
        raise ValueError(f"unknown signal {signal!r}")
    table = np.asarray(signal, dtype=float)
    if table.shape != (cmdp.n_states, cmdp.n_actions):
        raise DimensionMismatch(f"signal table has shape {table.shape}")
    return table


def _as_field(measure, n_states: int) -> MeasureField:
    if isinstance(measure, MeasureField):
        if measure.n_states != n_states:
            raise DimensionMismatch(f"measure field covers {measure.n_states} states, CMDP has {n_states}")
        return measure
    if isinstance(measure, FuzzyMeasure):
        return MeasureField.shared(measure, n_states)
    raise TypeError(f"expected FuzzyMeasure or MeasureField, got {type(measure).__name__}")


def _check_V(cmdp: TabularCMDP, V) -> np.ndarray:
    V = np.asarray(V, dtype=float)
    if V.shape != (cmdp.n_states,):
        raise DimensionMismatch(f"value table has shape {V.shape}, expected ({cmdp.n_states},)")
    return V


def apply_policy(Q: np.ndarray, policy=None, greedy: str = "max") -> np.ndarray:
    """Collapse action values (S, A) to state values.

    ``policy`` is ``None`` (greedy), an int array of actions, or a
    row-stochastic (S, A) table.
    """
    if policy is None:
        return Q.max(axis=1) if greedy == "max" else Q.min(axis=1)
    policy = np.asarray(policy)
    if policy.ndim == 1:
        if policy.shape[0] != Q.shape[0]:
            raise DimensionMismatch(f"policy covers {policy.shape[0]} states, expected {Q.shape[0]}")
        return Q[np.arange(Q.shape[0]), policy.astype(np.int64)]
    if policy.shape != Q.shape:
        raise DimensionMismatch(f"stochastic policy has shape {policy.shape}, expected {Q.shape}")
    return np.sum(policy * Q, axis=1)


def greedy_actions(Q: np.ndarray, greedy: str = "max", atol: float = 0.0) -> np.ndarray:
    """Deterministic greedy policy; ties (within ``atol``) go to the lowest action index."""
    Q = np.asarray(Q, dtype=float)
    if greedy == "min":
        Q = -Q
    best = Q.max(axis=1, keepdims=True)
    return np.argmax(Q >= best - atol, axis=1).astype(np.int64)


def level_table(cmdp: TabularCMDP, V, indices: np.ndarray) -> np.ndarray:
    """Level values of every (s, a), shape (S, A, K)."""
    per_state = level_value_table(V, indices)
    K = per_state.shape[1]
    return np.asarray(cmdp.p0 @ per_state).reshape(cmdp.n_states, cmdp.n_actions, K)


@dataclass(eq=False)
class Operator:
    """A Bellman operator on one CMDP.

    Parameters
    ----------
    kind : {"fuzzy", "dual-fuzzy", "minmax", "nominal"}
    levels : UncertaintyLevels
        Perturbation scheme; unused by ``nominal``.
    measure : FuzzyMeasure or MeasureField
        Shared or per-state measure for the fuzzy kinds; its K must equal
        ``levels.K``.
    sense : {"min", "max"}
        Which extreme level ``minmax`` keeps.
    signal : "reward", "cost" or an (S, A) array
        Immediate term of the backup.
    greedy : {"max", "min"}
        Direction of the action optimization when no policy is given.
    threads : int
        Worker threads for perturbation sampling; results do not depend on it.
    kernels : object with ``level_table(cmdp, V)``, optional
        Replaces perturbed-successor levels by explicit candidate kernels
        (see :class:`fuzzydp.lagrangian.KernelFamily`).
    """

    kind: str = "fuzzy"
    levels: UncertaintyLevels | None = None
    measure: FuzzyMeasure | MeasureField | None = None
    sense: str = "min"
    signal: object = "reward"
    greedy: str = "max"
    threads: int = 1
    kernels: object = None
    _indices: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}; expected one of {KINDS}")
        if self.kind != "nominal" and self.levels is None and self.kernels is None:
            raise ValueError(f"{self.kind} operator needs uncertainty levels")
        if self.kind in ("fuzzy", "dual-fuzzy"):
            if self.measure is None:
                raise ValueError(f"{self.kind} operator needs a measure")
            K = self.measure.K
            expected = self.kernels.K if self.kernels is not None else self.levels.K
            if K != expected:
                raise DimensionMismatch(f"measure has K = {K}, levels have K = {expected}")
        if self.sense not in ("min", "max"):
            raise ValueError(f"sense must be 'min' or 'max', got {self.sense!r}")

    def indices(self, cmdp: TabularCMDP) -> np.ndarray:
        key = id(cmdp)
        cached = self._indices.get(key)
        if cached is None or cached[0] is not cmdp:
            cached = (cmdp, perturbation_indices(cmdp.geometry, self.levels, self.threads))
            self._indices[key] = cached
        return cached[1]

    def aggregate(self, cmdp: TabularCMDP, V) -> np.ndarray:
        """Aggregated continuation value of every (s, a), shape (S, A)."""
        V = _check_V(cmdp, V)
        if self.kind == "nominal":
            return np.asarray(cmdp.p0 @ V).reshape(cmdp.n_states, cmdp.n_actions)
        if self.kernels is not None:
            L = self.kernels.level_table(cmdp, V)
        elif self.levels.eps_base == 0.0:
            # unperturbed levels all equal the nominal expectation
            nominal = np.asarray(cmdp.p0 @ V).reshape(cmdp.n_states, cmdp.n_actions, 1)
            L = np.broadcast_to(nominal, nominal.shape[:2] + (self.levels.K,))
        else:
            L = level_table(cmdp, V, self.indices(cmdp))
        if self.kind == "minmax":
            return L.min(axis=-1) if self.sense == "min" else L.max(axis=-1)
        rows = choquet_rows if self.kind == "fuzzy" else dual_choquet_rows
        if isinstance(self.measure, FuzzyMeasure):
            return rows(L, np.asarray(self.measure.g), self.measure.lam)
        fld = _as_field(self.measure, cmdp.n_states)
        return rows(L, fld.g[:, None, :], fld.lam[:, None])

    def q_values(self, cmdp: TabularCMDP, V) -> np.ndarray:
        return _signal_table(cmdp, self.signal) + cmdp.gamma * self.aggregate(cmdp, V)

    def backup(self, cmdp: TabularCMDP, V, policy=None) -> np.ndarray:
        return apply_policy(self.q_values(cmdp, V), policy, self.greedy)

    def with_(self, **changes) -> "Operator":
        params = dict(kind=self.kind, levels=self.levels, measure=self.measure, sense=self.sense,
                      signal=self.signal, greedy=self.greedy, threads=self.threads,
                      kernels=self.kernels)
        params.update(changes)
        op = Operator(**params)
        if op.levels == self.levels:
            op._indices = self._indices
        return op


def fuzzy_backup(cmdp, V, measure, levels, policy=None, signal="reward", greedy="max"):
    """Choquet-aggregated backup against ``measure`` (shared or per state)."""
    return Operator("fuzzy", levels, measure, signal=signal, greedy=greedy).backup(cmdp, V, policy)


def dual_fuzzy_backup(cmdp, V_c, measure, levels, policy=None, signal="cost", greedy="max"):
    """Backup aggregated by the dual Choquet integral (pessimistic for costs)."""
    return Operator("dual-fuzzy", levels, measure, signal=signal, greedy=greedy).backup(cmdp, V_c, policy)


def minmax_backup(cmdp, V, levels, policy=None, sense="min", signal="reward", greedy="max"):
    """Backup keeping the smallest (``sense="min"``) or largest level value."""
    return Operator("minmax", levels, sense=sense, signal=signal, greedy=greedy).backup(cmdp, V, policy)


def nominal_backup(cmdp, V, policy=None, signal="reward", greedy="max"):
    """Ordinary expected backup under the nominal kernel."""
    return Operator("nominal", signal=signal, greedy=greedy).backup(cmdp, V, policy)


@dataclass
class IterationTrace:
    residuals: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    def contraction_ratios(self) -> np.ndarray:
        r = np.asarray(self.residuals)
        with np.errstate(divide="ignore", invalid="ignore"):
            return r[1:] / r[:-1]

    def log_slope(self) -> float:
        """Least-squares slope of log residual against sweep index."""
        r = np.asarray(self.residuals)
        keep = r > 0
        if keep.sum() < 2:
            return -np.inf
        n = np.flatnonzero(keep)
        return float(np.polyfit(n, np.log(r[keep]), 1)[0])


def value_iteration(cmdp: TabularCMDP, operator: Operator, tol: float = 1e-8, max_iter: int = 10_000,
                    V0=None, policy=None):
    """Iterate ``operator`` from ``V0`` until the sup-norm change is at most ``tol``.

    Returns ``(V, trace)``; ``trace.residuals[n]`` is ``||V_{n+1} - V_n||``.
    """
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")
    V = np.zeros(cmdp.n_states) if V0 is None else _check_V(cmdp, V0).copy()
    trace = IterationTrace()
    for _ in range(int(max_iter)):
        new = operator.backup(cmdp, V, policy)
        if not np.all(np.isfinite(new)):
            raise NonFinite(f"backup produced non-finite values at sweep {trace.iterations + 1}")
        residual = float(np.max(np.abs(new - V))) if len(V) else 0.0
        trace.residuals.append(residual)
        trace.iterations += 1
        V = new
        if residual <= tol:
            trace.converged = True
            break
    return V, trace
