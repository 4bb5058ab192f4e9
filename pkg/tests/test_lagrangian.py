import itertools
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_cmdp, self_loop, two_state_cmdp
from fuzzydp.cmdp import TabularCMDP, load_cmdp
from fuzzydp.errors import ConditionsUnmet, InvariantViolation, ParseError, ShapeMismatch
from fuzzydp.lagrangian import (
    KernelFamily,
    LagrangianState,
    dumps_kernels,
    equivalence_check,
    evaluate_policy,
    greedy_policy,
    load_kernels,
    loads_kernels,
    multiplier_update,
    operator_pair,
    primal_dual_solve,
    robust_vi_oracle,
)
from fuzzydp.uncertainty import UncertaintyLevels

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def exact_values(P, table, policy, gamma):
    S = P.shape[0]
    Pp = P[np.arange(S), policy]
    return np.linalg.solve(np.eye(S) - gamma * Pp, table[np.arange(S), policy])


def best_feasible(m):
    """Exhaustive search over deterministic policies under the nominal kernel."""
    P = m.p0_dense()
    best = None
    for pi in itertools.product(range(m.n_actions), repeat=m.n_states):
        pi = np.array(pi)
        J_r = m.d0 @ exact_values(P, m.r, pi, m.gamma)
        J_c = m.d0 @ exact_values(P, m.c, pi, m.gamma)
        if J_c <= m.budget and (best is None or J_r > best[1]):
            best = (pi, J_r, J_c)
    return best


# -- evaluation and greedy ----------------------------------------------------------


def test_evaluate_self_loop():
    r_op, c_op = operator_pair("nominal")
    J_r, J_c, _, _ = evaluate_policy(self_loop(1.0, 0.5), np.array([0]), r_op, c_op)
    assert J_r == pytest.approx(2.0, abs=1e-9)
    assert J_c == 0.0


def test_evaluate_two_state_chain():
    # 0 -> 1 -> 1 deterministically, r(0) = 1, r(1) = 2
    P = np.array([[[0.0, 1.0]], [[0.0, 1.0]]])
    m = TabularCMDP(2, 1, P, [[1.0], [2.0]], [[0.0], [0.5]], 0.9, [1.0, 0.0])
    r_op, c_op = operator_pair("nominal")
    J_r, J_c, _, _ = evaluate_policy(m, np.array([0, 0]), r_op, c_op)
    assert J_r == pytest.approx(1 + 0.9 * 2 / 0.1, abs=1e-9)
    assert J_c == pytest.approx(0.9 * 0.5 / 0.1, abs=1e-9)


def test_greedy_examples():
    Q_r = np.array([[1.0, 2.0]])
    Q_c = np.array([[0.0, 10.0]])
    assert greedy_policy(Q_r, Q_c, 0.0).tolist() == [1]
    assert greedy_policy(Q_r, Q_c, 0.2).tolist() == [0]
    assert greedy_policy(Q_r, np.array([[3.0, 1.0]]), 1e9).tolist() == [1]
    assert greedy_policy(np.array([[1.0, 1.0]]), np.zeros((1, 2)), 0.0).tolist() == [0]
    with pytest.raises(ShapeMismatch):
        greedy_policy(Q_r, np.zeros((2, 2)), 1.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100), st.floats(0, 10))
def test_greedy_scale_invariance(seed, scale, mult):
    rng = np.random.default_rng(seed)
    Q_r = rng.normal(size=(5, 4))
    Q_c = rng.normal(size=(5, 4))
    a = greedy_policy(Q_r, Q_c, mult)
    b = greedy_policy(scale * Q_r, scale * Q_c, mult)
    gap = np.sort(Q_r - mult * Q_c, axis=1)
    clear = gap[:, -1] - gap[:, -2] > 1e-9
    np.testing.assert_array_equal(a[clear], b[clear])


# -- multiplier ---------------------------------------------------------------------


def test_multiplier_step():
    assert multiplier_update(0.1, 0.05, J_c=0.6, budget=1.0) == pytest.approx(0.08)
    assert multiplier_update(0.01, 0.05, J_c=0.0, budget=1.0) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 10), st.floats(1e-3, 1), st.floats(-10, 10), st.floats(0, 10))
def test_multiplier_projection(mult, alpha, J_c, budget):
    new = multiplier_update(mult, alpha, J_c, budget)
    assert new >= 0
    if J_c > budget:
        assert new == pytest.approx(mult + alpha * (J_c - budget))
        assert new > mult or alpha * (J_c - budget) < 1e-15 * max(1, mult)


def test_state_validation():
    with pytest.raises(ValueError):
        LagrangianState(alpha=0.0)
    with pytest.raises(ValueError):
        LagrangianState(multiplier=-1.0)


# -- primal-dual ------------------------------------------------------------------------


def test_unbounded_budget_keeps_multiplier_zero():
    m = two_state_cmdp(budget=np.inf)
    r_op, c_op = operator_pair("nominal")
    policy, state = primal_dual_solve(m, r_op, c_op, iters=5)
    assert all(row[3] == 0.0 for row in state.history)
    assert state.stop_reason == "feasible-stationary"
    assert policy.tolist() == best_feasible(m)[0].tolist()


def test_matches_enumeration_oracle():
    m = two_state_cmdp(budget=3.0)
    r_op, c_op = operator_pair("nominal")
    policy, state = primal_dual_solve(m, r_op, c_op, alpha=0.05, iters=100)
    pi, J_r, J_c = best_feasible(m)
    assert policy.tolist() == pi.tolist()
    assert state.history[-1][2] <= m.budget + 0.05
    assert all(row[3] >= 0 for row in state.history)


def test_primal_dual_fuzzy_operators():
    m = two_state_cmdp(budget=3.0)
    levels = UncertaintyLevels(3, 0.3, 5)
    from fuzzydp.measure import FuzzyMeasure

    r_op, c_op = operator_pair("fuzzy", levels, FuzzyMeasure.from_densities([0.2, 0.2, 0.2]))
    policy, state = primal_dual_solve(m, r_op, c_op, iters=40)
    assert state.history[-1][2] <= m.budget
    assert state.stop_reason in ("feasible-stationary", "budget-feasible")


def test_primal_dual_arguments():
    r_op, c_op = operator_pair("nominal")
    with pytest.raises(ValueError):
        primal_dual_solve(two_state_cmdp(), r_op, c_op, alpha=0)
    with pytest.raises(ValueError):
        primal_dual_solve(two_state_cmdp(), r_op, c_op, iters=0)


# -- robust oracle ----------------------------------------------------------------------------


def test_single_candidate_equals_nominal(rng):
    m = random_cmdp(rng, S=6, A=2)
    fam = KernelFamily(m.p0_dense()[:, :, None, :])
    V = robust_vi_oracle(m, fam, "min")
    r_op, _ = operator_pair("nominal")
    from fuzzydp.bellman import value_iteration

    ref, _ = value_iteration(m, r_op, tol=1e-12, max_iter=100000)
    np.testing.assert_allclose(V, ref, atol=1e-9)


def test_dominated_candidate_wins():
    # candidate 0 jumps to an absorbing zero-reward state; rewards are nonnegative
    S = 3
    rows = np.zeros((S, 1, 2, S))
    rows[:, 0, 0, 2] = 1.0
    rows[:, 0, 1, 0] = 1.0
    r = np.array([[1.0], [1.0], [0.0]])
    m = TabularCMDP(S, 1, rows[:, :, 1], r, np.zeros((S, 1)), 0.9, [1, 0, 0])
    V = robust_vi_oracle(m, KernelFamily(rows), "min")
    np.testing.assert_allclose(V, [1.0, 1.0, 0.0], atol=1e-9)


def test_sense_order(rng):
    m = random_cmdp(rng, S=5, A=2)
    fam = KernelFamily(np.stack([m.p0_dense(), random_cmdp(rng, S=5, A=2).p0_dense()], axis=2))
    lo = robust_vi_oracle(m, fam, "min", signal="reward", policy=np.zeros(5, int))
    hi = robust_vi_oracle(m, fam, "max", signal="reward", policy=np.zeros(5, int))
    assert np.all(hi >= lo - 1e-12)


# -- equivalence harness ----------------------------------------------------------------------


def random_family(rng, S=5, A=2, n=3):
    rows = rng.dirichlet(np.ones(S) * 0.7, size=(S, A, n))
    m = TabularCMDP(S, A, rows[:, :, 0], rng.uniform(0, 1, (S, A)), rng.uniform(0, 1, (S, A)),
                    0.9, np.ones(S) / S)
    return m, KernelFamily(rows)


def test_single_kernel_gaps_zero(rng):
    m, fam = random_family(rng, n=1)
    report = equivalence_check(m, fam, [0.4])
    assert report.gap_r == 0.0 and report.gap_c == 0.0
    assert report.policies_equal


def test_core_uncertainty_set(rng):
    for _ in range(3):
        m, fam = random_family(rng)
        report = equivalence_check(m, fam, rng.uniform(0.05, 0.3, 3), "core")
        assert report.conditions_met
        assert report.gap_r <= 1e-6 and report.gap_c <= 1e-6
        assert report.policies_equal


def test_point_mass_on_worst_kernel():
    m = load_cmdp(CONFIGS / "trap5.cmdp")
    fam = load_kernels(CONFIGS / "trap5.kernels")
    report = equivalence_check(m, fam, [1.0, 0.0, 0.0])
    assert report.lam == 0.0
    assert report.gap_r <= 1e-6 and report.gap_c <= 1e-6


def test_family_conditions_fail_for_spread_densities(rng):
    m, fam = random_family(rng)
    with pytest.raises(ConditionsUnmet) as err:
        equivalence_check(m, fam, [0.2, 0.25, 0.3])
    assert err.value.report is not None
    assert any("(2)" in c or "(3)" in c for c in err.value.conditions)


def test_negative_lambda_fails_condition_one(rng):
    m, fam = random_family(rng)
    with pytest.raises(ConditionsUnmet) as err:
        equivalence_check(m, fam, [0.5, 0.5, 0.5])
    assert "(1) core(m) in P" in err.value.conditions


def test_report_text_and_rows(rng):
    m, fam = random_family(rng, n=1)
    report = equivalence_check(m, fam, [0.5])
    assert "gap_r = 0.0" in report.text()
    assert [row[0] for row in report.csv_rows()] == ["reward", "cost"]


# -- kernel files -------------------------------------------------------------------------------


def test_kernel_roundtrip(rng):
    _, fam = random_family(rng)
    text = dumps_kernels(fam)
    again = loads_kernels(text)
    np.testing.assert_array_equal(again.rows, fam.rows)
    assert dumps_kernels(again) == text


def test_kernel_parse_errors():
    with pytest.raises(ParseError):
        loads_kernels("n_states = 2\nn_actions = 1\nn_candidates = 1\n0 0 0:1.0\n")
    with pytest.raises(ParseError):
        loads_kernels("n_states = 1\nn_actions = 1\nn_candidates = 1\n0 0 5:1.0\n")
    with pytest.raises(InvariantViolation):
        loads_kernels("n_states = 1\nn_actions = 1\nn_candidates = 1\n0 0 0:0.5\n")
