"""Double-integrator comparison of fuzzy, min-max and nominal planning.

Each operator plans on the discretized double integrator with the
penalized signal ``r - penalty * c``.  The greedy policy is then rolled
out in the continuous system, with Gaussian state noise of scale
``test_level * eps_base`` added after every step.  All operators share the
same noise draws for a given seed.

AvgRet is the mean undiscounted episode return.  AvgRisk is the fraction
of episodes that leave the safe box at least once.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .bellman import Operator, greedy_actions, value_iteration
from .cmdp import GridSpec, build_double_integrator, di_cost, di_reward, di_step
from .measure import FuzzyMeasure
from .uncertainty import UncertaintyLevels, stream

ROLLOUT_STREAM = 1 << 40
OPERATORS = ("fuzzy", "minmax", "nominal")


@dataclass(frozen=True)
class DemoConfig:
    cells: int = 51
    n_actions: int = 11
    dt: float = 0.1
    gamma: float = 0.97
    penalty: float = 10.0
    K: int = 10
    eps_base: float = 0.01
    M: int = 5
    density_sum: float = 0.5
    test_level: float = 4.0
    episodes: int = 100
    horizon: int = 150
    tol: float = 1e-4
    max_iter: int = 3000
    seed: int = 0
    threads: int = 1

    def grid(self) -> GridSpec:
        return GridSpec((-2.5, -2.5), (2.5, 2.5), (self.cells, self.cells), self.n_actions)

    @property
    def test_noise(self) -> float:
        return self.test_level * self.eps_base


@dataclass
class DemoResult:
    operator: str
    avg_return: float
    avg_risk: float
    episodes: int
    step_risk: float
    sweeps: int
    converged: bool
    seconds: float


def uniform_measure(K: int, total: float) -> FuzzyMeasure:
    """Equal densities ``total / K``; one level gets the trivial measure."""
    if K == 1:
        return FuzzyMeasure.from_densities([0.5])
    return FuzzyMeasure.from_densities([total / K] * K)


def rollout(cmdp, grid: GridSpec, policy, config: DemoConfig):
    """Average return, episode violation rate and step violation rate."""
    E, T = config.episodes, config.horizon
    noise = stream(config.seed, ROLLOUT_STREAM).standard_normal((T, E, 2)) * config.test_noise
    actions = cmdp.actions if cmdp.actions is not None else grid.actions
    s = np.zeros((E, 2))
    ret = np.zeros(E)
    violated = np.zeros(E, dtype=bool)
    unsafe_steps = 0.0
    for t in range(T):
        a = actions[policy[grid.snap(s)]]
        s = di_step(s, a, "standard", config.dt) + noise[t]
        ret += di_reward(s)
        cost = di_cost(s)
        violated |= cost > 0
        unsafe_steps += float(cost.sum())
        s = grid.clip(s)
    return float(ret.mean()), float(violated.mean()), unsafe_steps / (E * T)


def plan(cmdp, kind: str, config: DemoConfig, levels: UncertaintyLevels, measure, signal):
    if kind == "nominal":
        op = Operator("nominal", signal=signal)
    elif kind == "fuzzy":
        op = Operator("fuzzy", levels, measure, signal=signal, threads=config.threads)
    else:
        op = Operator("minmax", levels, sense="min", signal=signal, threads=config.threads)
    V, trace = value_iteration(cmdp, op, tol=config.tol, max_iter=config.max_iter)
    return greedy_actions(op.q_values(cmdp, V)), trace


def run_demo(config: DemoConfig = DemoConfig(), operators=OPERATORS) -> list[DemoResult]:
    grid = config.grid()
    cmdp = build_double_integrator(grid, "standard", config.dt, config.gamma)
    signal = cmdp.r - config.penalty * cmdp.c
    levels = UncertaintyLevels(config.K, config.eps_base, config.M, config.seed)
    measure = uniform_measure(config.K, config.density_sum)
    results = []
    for kind in operators:
        start = time.perf_counter()
        policy, trace = plan(cmdp, kind, config, levels, measure, signal)
        ret, risk, step_risk = rollout(cmdp, grid, policy, config)
        results.append(DemoResult(kind, ret, risk, config.episodes, step_risk, trace.iterations,
                                  trace.converged, time.perf_counter() - start))
    return results


def run_ablation(config: DemoConfig = DemoConfig(), Ks=(1, 5, 15, 25), seeds=(0,)):
    """Fuzzy demo at several level counts; returns ``(K, seed, DemoResult)`` rows."""
    rows = []
    for seed in seeds:
        for K in Ks:
            cfg = DemoConfig(**{**config.__dict__, "K": int(K), "seed": int(seed)})
            rows.append((int(K), int(seed), run_demo(cfg, ("fuzzy",))[0]))
    return rows
