import numpy as np
import pytest

from stochmp.bsee import (AdjointPair, AdjointRegressor, EnsembleMismatchError, UnsupportedProblemError,
                          check_duality, compare_adjoints, lq_feedback_cost, solve_adjoint_regression,
                          solve_adjoint_riccati, solve_riccati)
from stochmp.controls import Control
from stochmp.mp import spike_control
from stochmp.problems import lq, lq_scalar, nonlinear_scalar
from stochmp.see import StatePath, solve_first_variation, solve_state
from stochmp.stochastics import McConfig, TimeGrid, sample_ensemble

GRID = TimeGrid(128)


@pytest.fixture(scope="module")
def lq_setup():
    problem, sol = lq_scalar()
    w = sample_ensemble(GRID, McConfig(paths=20_000, seed=3))
    bar = solve_state(problem, Control(feedback=sol.control), w)
    reg = AdjointRegressor().fit(bar, problem)
    return problem, sol, w, bar, reg


def test_riccati_adjoint_terminal_and_feedback(lq_setup):
    problem, sol, _, bar, _ = lq_setup
    ref = solve_adjoint_riccati(problem, bar, sol)
    np.testing.assert_allclose(ref.p[:, -1], bar.values[:, -1] @ problem.lq.M, rtol=1e-10)
    # with C = 1, D = 0, R = 1 the optimal control is -p
    k = 40
    np.testing.assert_allclose(bar.control.values[:, k], -ref.p[:, k], rtol=1e-10, atol=1e-14)


def test_regression_agrees_with_riccati(lq_setup):
    problem, sol, _, bar, reg = lq_setup
    est = reg.adjoint_
    ref = solve_adjoint_riccati(problem, bar, sol)
    res = compare_adjoints(est, ref)
    assert res["passed"], res
    assert res["terminal_max"] == 0.0
    assert res["p_rel"] < 0.02 and res["q_rel"] < 0.02
    assert est.p_se.shape == (GRID.steps + 1,) and np.all(est.p_se[:-1] > 0)


def test_regression_adjoint_is_linear_for_lq(lq_setup):
    _, _, _, bar, reg = lq_setup
    meta, beta_p, beta_q = reg.coef_[64]
    # quadratic coefficient negligible: the discrete adjoint is affine in the state
    assert abs(beta_p[2]) < 1e-2 * abs(beta_p[1])
    p_hat, q_hat = reg.predict(64, bar.values[:5, 64])
    np.testing.assert_allclose(p_hat, reg.adjoint_.p_hat[:5, 64], rtol=1e-12)
    np.testing.assert_allclose(q_hat, reg.adjoint_.q[:5, 64], rtol=1e-12)


def test_stderr_switch(lq_setup):
    problem, _, _, bar, reg = lq_setup
    fast = solve_adjoint_regression(problem, bar, stderr=False)
    np.testing.assert_array_equal(fast.p, reg.adjoint_.p)
    assert not fast.p_se.any()


def test_compare_flags_a_biased_estimate(lq_setup):
    problem, sol, _, bar, _ = lq_setup
    ref = solve_adjoint_riccati(problem, bar, sol)
    biased = AdjointPair(ref.p * 1.1, ref.q, ref.grid, "riccati-oracle")
    biased.p[:, -1] = ref.p[:, -1]
    res = compare_adjoints(biased, ref)
    assert not res["passed"] and res["p_worst_ratio"] > 1
    moved = AdjointPair(ref.p.copy(), ref.q, ref.grid, "riccati-oracle")
    moved.p[0, -1] += 1e-9
    assert not compare_adjoints(moved, ref)["passed"]


def test_duality_with_regression_adjoint(lq_setup):
    problem, _, w, bar, reg = lq_setup
    ueps = spike_control(bar.control, 0.5, 1 / 16, [1.0], GRID)
    x1 = solve_first_variation(problem, bar, ueps, w)
    rep = check_duality(reg.adjoint_, x1, problem, bar, ueps)
    assert rep.passed, rep
    assert rep.lhs > 0


def test_duality_nonlinear():
    problem = nonlinear_scalar()
    w = sample_ensemble(GRID, McConfig(paths=20_000, seed=5))
    bar = solve_state(problem, Control.constant([0.2], GRID), w)
    adj = solve_adjoint_regression(problem, bar)
    ueps = spike_control(bar.control, 0.5, 1 / 16, [1.0], GRID)
    x1 = solve_first_variation(problem, bar, ueps, w)
    assert check_duality(adj, x1, problem, bar, ueps).passed


def test_energy_finite_and_positive(lq_setup):
    e = lq_setup[4].adjoint_.energy()
    assert np.isfinite(e) and e > 0


def test_feedback_cost_oracle_matches_riccati():
    problem = lq(np.diag([-1.0, -0.5]), 0.3 * np.eye(2), C=np.eye(2), G=0.1, D=0.2 * np.eye(2),
                 Q=np.diag([1.0, 2.0]), r=[0.5, -0.5], x0=[1.0, -1.0])
    sol = solve_riccati(problem)
    assert abs(lq_feedback_cost(problem, sol.gain) - sol.cost) < 1e-8
    worse = lq_feedback_cost(problem, lambda t: (0.5 * sol.gain(t)[0], sol.gain(t)[1]))
    assert worse > sol.cost


def test_riccati_requires_lq():
    with pytest.raises(UnsupportedProblemError):
        solve_riccati(nonlinear_scalar())


def test_regressor_input_errors(lq_setup):
    problem, _, w, bar, _ = lq_setup
    with pytest.raises(ValueError, match="degree"):
        AdjointRegressor(degree=3).fit(bar, problem)
    bare = StatePath(bar.values, bar.grid, "state", control=bar.control)
    with pytest.raises(EnsembleMismatchError):
        AdjointRegressor().fit(bare, problem)


def test_adjoint_pair_validation():
    with pytest.raises(ValueError):
        AdjointPair(np.zeros((2, 3, 1)), np.zeros((2, 3, 1)), GRID, "guess")
    with pytest.raises(ValueError):
        AdjointPair(np.zeros((2, 3, 1)), np.zeros((2, 4, 1)), GRID, "regression")
