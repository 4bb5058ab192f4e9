"""Primal-dual constrained policy optimization, robust baselines, and the
fuzzy/robust equivalence harness.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linprog

from .bellman import Operator, apply_policy, greedy_actions, value_iteration
from .cmdp import TabularCMDP
from .errors import (
    ConditionsUnmet,
    DimensionMismatch,
    InvariantViolation,
    NonFinite,
    ParseError,
    ShapeMismatch,
)
from .measure import FuzzyMeasure, marginal_vectors, subset_bits
from .uncertainty import UncertaintyLevels

EVAL_TOL = 1e-9
STATIONARY_TOL = 1e-9


# -- operator pairs ---------------------------------------------------------


def operator_pair(kind: str, levels: UncertaintyLevels | None = None, measure=None,
                  kernels=None, threads: int = 1) -> tuple[Operator, Operator]:
    """Reward and cost operators of one aggregation scheme.

    ``fuzzy`` pairs the Choquet integral (rewards) with its dual (costs),
    ``minmax`` pairs the smallest level with the largest, and ``nominal``
    uses the plain expectation for both.
    """
    common = dict(levels=levels, threads=threads, kernels=kernels)
    if kind == "fuzzy":
        reward = Operator("fuzzy", measure=measure, signal="reward", **common)
        cost = Operator("dual-fuzzy", measure=measure, signal="cost", greedy="min", **common)
    elif kind == "minmax":
        reward = Operator("minmax", sense="min", signal="reward", **common)
        cost = Operator("minmax", sense="max", signal="cost", greedy="min", **common)
    elif kind == "nominal":
        reward = Operator("nominal", signal="reward")
        cost = Operator("nominal", signal="cost", greedy="min")
    else:
        raise ValueError(f"unknown operator kind {kind!r}")
    if kind != "nominal" and cost.levels == reward.levels:
        cost._indices = reward._indices
    return reward, cost


def _eval_tol(cmdp: TabularCMDP) -> float:
    return max(EVAL_TOL * (1.0 - cmdp.gamma), 1e-14)


def evaluate_policy(cmdp: TabularCMDP, policy, reward_op: Operator, cost_op: Operator,
                    V_r0=None, V_c0=None):
    """Fixed-point values of ``policy`` under the reward and cost operators.

    Returns ``(J_r, J_c, V_r, V_c)`` with ``J = d0 . V``.
    """
    tol = _eval_tol(cmdp)
    V_r, tr_r = value_iteration(cmdp, reward_op, tol=tol, max_iter=200_000, V0=V_r0, policy=policy)
    V_c, tr_c = value_iteration(cmdp, cost_op, tol=tol, max_iter=200_000, V0=V_c0, policy=policy)
    if not (tr_r.converged and tr_c.converged):
        raise NonFinite("policy evaluation did not converge")
    return float(cmdp.d0 @ V_r), float(cmdp.d0 @ V_c), V_r, V_c


def greedy_policy(Q_r, Q_c, multiplier: float, atol: float = 0.0) -> np.ndarray:
    """Deterministic argmax of ``Q_r - multiplier * Q_c``; ties to the lowest action."""
    Q_r = np.asarray(Q_r, dtype=float)
    Q_c = np.asarray(Q_c, dtype=float)
    if Q_r.shape != Q_c.shape or Q_r.ndim != 2:
        raise ShapeMismatch(f"Q tables have shapes {Q_r.shape} and {Q_c.shape}")
    if multiplier == 0.0:
        return greedy_actions(Q_r, atol=atol)
    return greedy_actions(Q_r - multiplier * Q_c, atol=atol)


def multiplier_update(multiplier: float, alpha: float, J_c: float, budget: float) -> float:
    """Projected ascent step ``max(0, multiplier + alpha * (J_c - budget))``."""
    step = multiplier + alpha * (J_c - budget)
    return max(0.0, step) if not math.isnan(step) else multiplier


@dataclass
class LagrangianState:
    """Multiplier, step size and per-iteration history of the primal-dual loop.

    ``history`` rows are ``(iteration, J_r, J_c, multiplier)`` where the
    multiplier is the one the iteration's policy was greedy against.
    """

    multiplier: float = 0.0
    alpha: float = 0.05
    history: list = field(default_factory=list)
    stop_reason: str = ""

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.multiplier < 0:
            raise ValueError("multiplier must be nonnegative")


def improve_policy(cmdp, reward_op, cost_op, multiplier, policy=None, max_rounds: int = 50):
    """Policy iteration on ``J_r - multiplier * J_c`` from ``policy``.

    Each round evaluates the current policy under both operators and takes
    the greedy policy of ``Q_r - multiplier * Q_c``.  Stops when the
    policy repeats (or after ``max_rounds``).  Returns the policy and its
    ``(J_r, J_c, V_r, V_c)``.
    """
    if policy is None:
        zeros = np.zeros(cmdp.n_states)
        policy = greedy_policy(reward_op.q_values(cmdp, zeros), cost_op.q_values(cmdp, zeros), multiplier)
    seen = set()
    V_r = V_c = None
    for _ in range(max_rounds):
        J_r, J_c, V_r, V_c = evaluate_policy(cmdp, policy, reward_op, cost_op, V_r, V_c)
        new = greedy_policy(reward_op.q_values(cmdp, V_r), cost_op.q_values(cmdp, V_c), multiplier,
                            atol=1e-12)
        key = new.tobytes()
        if np.array_equal(new, policy) or key in seen:
            break
        seen.add(policy.tobytes())
        policy = new
    return policy, (J_r, J_c, V_r, V_c)


def primal_dual_solve(cmdp: TabularCMDP, reward_op: Operator, cost_op: Operator, alpha: float = 0.05,
                      iters: int = 100, multiplier: float = 0.0, settle_iters: int | None = None,
                      callback=None):
    """Alternate greedy policy improvement and projected multiplier ascent.

    Iteration ``k`` computes the Lagrangian-greedy policy for the current
    multiplier, evaluates ``J_r`` and the pessimistic ``J_c``, and updates
    ``multiplier <- max(0, multiplier + alpha * (J_c - budget))``.

    Stopping: early when an iterate is feasible and the multiplier update
    is below 1e-9 (``"feasible-stationary"``); otherwise after ``iters``
    iterations at the first feasible iterate, searching at most
    ``settle_iters`` more (``"budget-feasible"``, ``"budget-infeasible"``).
    The returned policy is greedy for ``state.multiplier``.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    settle_iters = iters if settle_iters is None else settle_iters
    state = LagrangianState(float(multiplier), float(alpha))
    budget = cmdp.budget
    policy = None
    k = 0
    while True:
        policy, (J_r, J_c, _, _) = improve_policy(cmdp, reward_op, cost_op, state.multiplier, policy)
        if not (math.isfinite(J_r) and math.isfinite(J_c)):
            raise NonFinite(f"non-finite objective at iteration {k}")
        state.history.append((k, J_r, J_c, state.multiplier))
        if callback is not None:
            callback(k, policy, J_r, J_c, state.multiplier)
        feasible = J_c <= budget
        new = multiplier_update(state.multiplier, alpha, J_c, budget)
        k += 1
        if feasible and abs(new - state.multiplier) < STATIONARY_TOL:
            state.stop_reason = "feasible-stationary"
            break
        if k >= iters:
            if feasible:
                state.stop_reason = "budget-feasible"
                break
            if k >= iters + settle_iters:
                state.stop_reason = "budget-infeasible"
                break
        state.multiplier = new
    return policy, state


# -- explicit kernel families -----------------------------------------------


@dataclass(frozen=True, eq=False)
class KernelFamily:
    """Candidate transition rows per (state, action), shape (S, A, K, S)."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.array(self.rows, dtype=float)
        if rows.ndim != 4 or rows.shape[0] != rows.shape[3]:
            raise DimensionMismatch(f"kernel rows must have shape (S, A, K, S), got {rows.shape}")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def K(self) -> int:
        return self.rows.shape[2]

    def validate(self) -> list[str]:
        report = []
        sums = self.rows.sum(axis=-1)
        for s, a, k in np.argwhere((np.abs(sums - 1.0) > 1e-9) | np.any(self.rows < 0, axis=-1)):
            report.append(f"kernel (state {s}, action {a}, candidate {k}): not a probability row")
        return report

    def level_table(self, cmdp: TabularCMDP, V) -> np.ndarray:
        return np.einsum("sakt,t->sak", self.rows, np.asarray(V, dtype=float))

    def mixtures(self, weights: np.ndarray) -> "KernelFamily":
        """Family whose candidates are ``weights @ rows`` per (s, a)."""
        return KernelFamily(np.einsum("nk,sakt->sant", np.asarray(weights, dtype=float), self.rows))


def robust_vi_oracle(cmdp: TabularCMDP, kernels: KernelFamily, sense: str = "min",
                     signal: str = "reward", policy=None, tol: float = 1e-10,
                     max_iter: int = 200_000) -> np.ndarray:
    """Robust value iteration by exact enumeration of candidate rows.

    Each sweep takes the ``sense`` extreme of the candidate expectations.
    Without a policy the controller maximizes rewards and minimizes costs.
    """
    table = cmdp.r if signal == "reward" else cmdp.c
    pick = np.min if sense == "min" else np.max
    V = np.zeros(cmdp.n_states)
    tol = tol * (1.0 - cmdp.gamma)
    for _ in range(max_iter):
        expect = np.einsum("sakt,t->sak", kernels.rows, V)
        Q = table + cmdp.gamma * pick(expect, axis=-1)
        if policy is None:
            new = Q.max(axis=1) if signal == "reward" else Q.min(axis=1)
        else:
            new = apply_policy(Q, policy)
        if not np.all(np.isfinite(new)):
            raise NonFinite("robust oracle produced non-finite values")
        done = np.max(np.abs(new - V)) <= tol
        V = new
        if done:
            return V
    raise NonFinite("robust oracle did not converge")


def robust_q(cmdp, kernels: KernelFamily, V, sense: str, signal: str) -> np.ndarray:
    table = cmdp.r if signal == "reward" else cmdp.c
    expect = np.einsum("sakt,t->sak", kernels.rows, V)
    return table + cmdp.gamma * (expect.min(axis=-1) if sense == "min" else expect.max(axis=-1))


@dataclass
class EquivalenceReport:
    conditions: dict
    J_fuzzy_r: float = math.nan
    J_fuzzy_c: float = math.nan
    J_robust_r: float = math.nan
    J_robust_c: float = math.nan
    policies_equal: bool = False
    lam: float = math.nan
    uncertainty_set: str = "family"
    policy_fuzzy: np.ndarray | None = None
    policy_robust: np.ndarray | None = None

    @property
    def gap_r(self) -> float:
        return abs(self.J_fuzzy_r - self.J_robust_r)

    @property
    def gap_c(self) -> float:
        return abs(self.J_fuzzy_c - self.J_robust_c)

    @property
    def conditions_met(self) -> bool:
        return all(self.conditions.values())

    def unmet(self) -> list[str]:
        return [name for name, ok in self.conditions.items() if not ok]

    def text(self) -> str:
        lines = [f"uncertainty_set = {self.uncertainty_set}", f"lambda = {self.lam!r}"]
        lines += [f"condition {name} = {'ok' if ok else 'FAILED'}" for name, ok in self.conditions.items()]
        lines += [f"J_fuzzy_r = {self.J_fuzzy_r!r}", f"J_robust_r = {self.J_robust_r!r}",
                  f"gap_r = {self.gap_r!r}", f"J_fuzzy_c = {self.J_fuzzy_c!r}",
                  f"J_robust_c = {self.J_robust_c!r}", f"gap_c = {self.gap_c!r}",
                  f"policies_equal = {self.policies_equal}"]
        return "\n".join(lines) + "\n"

    def csv_rows(self) -> list[tuple]:
        return [("reward", self.J_fuzzy_r, self.J_robust_r, self.gap_r),
                ("cost", self.J_fuzzy_c, self.J_robust_c, self.gap_c)]


def measure_from_densities(densities) -> FuzzyMeasure:
    """Lambda-measure for densities; boundary values 0/1 are accepted only
    for additive (sum-to-one) densities."""
    g = np.asarray(densities, dtype=float).ravel()
    if np.any((g <= 0) | (g >= 1)) and g.size > 1:
        return FuzzyMeasure.additive(g)
    return FuzzyMeasure.from_densities(g)


def _in_hull(target: np.ndarray, points: np.ndarray, tol: float = 1e-9) -> bool:
    """Whether ``target`` is a convex combination of the rows of ``points``."""
    n = len(points)
    A_eq = np.vstack([points.T, np.ones((1, n))])
    b_eq = np.concatenate([target, [1.0]])
    # slack variables absorb rounding: |A w - b| <= tol
    m = A_eq.shape[0]
    A = np.hstack([A_eq, np.eye(m), -np.eye(m)])
    c = np.concatenate([np.zeros(n), np.ones(2 * m)])
    res = linprog(c, A_eq=A, b_eq=b_eq, bounds=[(0, None)] * (n + 2 * m), method="highs")
    return bool(res.status == 0 and res.fun <= tol * m)


def equivalence_check(cmdp: TabularCMDP, kernels: KernelFamily, densities,
                      uncertainty_set: str = "family", raise_on_unmet: bool = True,
                      tie_tol: float = 1e-9) -> EquivalenceReport:
    """Compare fuzzy and robust objectives over an explicit kernel family.

    The fuzzy side aggregates candidate-kernel expectations with the
    lambda-measure built from ``densities`` (one per candidate): Choquet
    integral for rewards, dual integral for costs.  The robust side runs
    :func:`robust_vi_oracle` over the uncertainty set, which is either the
    supplied candidates (``"family"``) or the kernels induced by the core
    extreme points of the measure (``"core"``).

    Conditions verified before comparing:

    1. the measure is convex and every marginal vector is a probability
       vector dominating it, so each induced kernel lies in the set;
    2. for every (s, a), a candidate minimizing the one-step expectation of
       the robust reward value is a kernel induced by some core element;
    3. likewise for a candidate maximizing the robust cost value.
    """
    if uncertainty_set not in ("family", "core"):
        raise ValueError(f"uncertainty_set must be 'family' or 'core', got {uncertainty_set!r}")
    bad = kernels.validate()
    if bad:
        raise DimensionMismatch("; ".join(bad))
    m = measure_from_densities(densities)
    if m.K != kernels.K:
        raise DimensionMismatch(f"{m.K} densities for {kernels.K} candidate kernels")
    _, points = marginal_vectors(m.table(), m.K)
    bits = subset_bits(m.K).astype(float)
    valid = np.all(points >= -1e-12) and np.allclose(points.sum(axis=1), 1.0, atol=1e-12)
    dominating = bool(np.all(points @ bits.T >= m.table()[None, :] - 1e-12))
    conditions = {"(1) core(m) in P": bool(m.lam >= 0 and valid and dominating)}
    report = EquivalenceReport(conditions, lam=m.lam, uncertainty_set=uncertainty_set)

    family = kernels if uncertainty_set == "family" else kernels.mixtures(np.unique(points, axis=0))

    V_rob_r = robust_vi_oracle(cmdp, family, "min", "reward")
    Q_rob_r = robust_q(cmdp, family, V_rob_r, "min", "reward")
    pi_rob = greedy_actions(Q_rob_r, atol=tie_tol)
    V_rob_c = robust_vi_oracle(cmdp, family, "max", "cost", policy=pi_rob)

    # core-induced kernels per (s, a), shape (S, A, n_points, S)
    induced = np.einsum("nk,sakt->sant", points, kernels.rows)
    ok_r = ok_c = True
    for (V, pick, name) in ((V_rob_r, np.min, "r"), (V_rob_c, np.max, "c")):
        expect = np.einsum("sakt,t->sak", family.rows, V)
        target = pick(expect, axis=-1, keepdims=True)
        for s in range(cmdp.n_states):
            for a in range(cmdp.n_actions):
                extremal = np.flatnonzero(np.abs(expect[s, a] - target[s, a]) <= tie_tol)
                if not any(_in_hull(family.rows[s, a, j], induced[s, a]) for j in extremal):
                    if name == "r":
                        ok_r = False
                    else:
                        ok_c = False
                    break
            if (name == "r" and not ok_r) or (name == "c" and not ok_c):
                break
    conditions["(2) argmin E[r] in core(m)"] = ok_r
    conditions["(3) argmax E[c] in core(m)"] = ok_c
    report.policy_robust = pi_rob
    report.J_robust_r = float(cmdp.d0 @ V_rob_r)
    report.J_robust_c = float(cmdp.d0 @ V_rob_c)

    if m.lam >= 0:
        reward_op, cost_op = operator_pair("fuzzy", measure=m, kernels=kernels)
        tol = _eval_tol(cmdp) * 1e-1
        V_f_r, _ = value_iteration(cmdp, reward_op, tol=tol, max_iter=500_000)
        pi_f = greedy_actions(reward_op.q_values(cmdp, V_f_r), atol=tie_tol)
        V_f_c, _ = value_iteration(cmdp, cost_op, tol=tol, max_iter=500_000, policy=pi_f)
        report.policy_fuzzy = pi_f
        report.J_fuzzy_r = float(cmdp.d0 @ V_f_r)
        report.J_fuzzy_c = float(cmdp.d0 @ V_f_c)
        report.policies_equal = bool(np.array_equal(pi_f, pi_rob))
    if raise_on_unmet and not report.conditions_met:
        raise ConditionsUnmet(report.unmet(), report)
    return report


# -- kernel files -----------------------------------------------------------
#
#   n_states = 2
#   n_actions = 1
#   n_candidates = 2
#   0 0 0:1.0          # state action next:prob ...; one candidate per line,
#   0 0 0:0.5 1:0.5    # candidates of a pair numbered in order of appearance


def dumps_kernels(kernels: KernelFamily) -> str:
    S, A, n, _ = kernels.rows.shape
    lines = [f"n_states = {S}", f"n_actions = {A}", f"n_candidates = {n}"]
    for s in range(S):
        for a in range(A):
            for k in range(n):
                row = kernels.rows[s, a, k]
                cells = " ".join(f"{t}:{float(row[t])!r}" for t in np.flatnonzero(row))
                lines.append(f"{s} {a} {cells}")
    return "\n".join(lines) + "\n"


def loads_kernels(text: str) -> KernelFamily:
    header = {}
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in ("n_states", "n_actions", "n_candidates"):
                raise ParseError(f"unknown key {key!r}", lineno)
            try:
                header[key] = int(value)
            except ValueError:
                raise ParseError(f"{key} must be an integer", lineno) from None
            continue
        entries.append((lineno, line.split()))
    for key in ("n_states", "n_actions", "n_candidates"):
        if header.get(key, 0) < 1:
            raise ParseError(f"missing or invalid {key}")
    S, A, n = header["n_states"], header["n_actions"], header["n_candidates"]
    rows = np.zeros((S, A, n, S))
    count = np.zeros((S, A), dtype=int)
    for lineno, tokens in entries:
        try:
            s, a = int(tokens[0]), int(tokens[1])
            cells = [tok.split(":") for tok in tokens[2:]]
            pairs = [(int(t), float(p)) for t, p in cells]
        except (ValueError, IndexError):
            raise ParseError("expected 'state action next:prob ...'", lineno) from None
        if not (0 <= s < S and 0 <= a < A) or any(not 0 <= t < S for t, _ in pairs):
            raise ParseError("index out of range", lineno)
        if count[s, a] >= n:
            raise ParseError(f"more than {n} candidates for state {s}, action {a}", lineno)
        for t, p in pairs:
            rows[s, a, count[s, a], t] += p
        count[s, a] += 1
    missing = np.argwhere(count != n)
    if len(missing):
        s, a = missing[0]
        raise ParseError(f"state {s}, action {a} has {count[s, a]} candidates, expected {n}")
    family = KernelFamily(rows)
    bad = family.validate()
    if bad:
        raise InvariantViolation(bad)
    return family


def load_kernels(path) -> KernelFamily:
    return loads_kernels(Path(path).read_text())


def write_kernels(kernels: KernelFamily, path) -> None:
    Path(path).write_text(dumps_kernels(kernels))
