import numpy as np
import pytest

from stochmp.operators import EvolutionOperatorPair
from stochmp.riesz import (AdjointTuple, NotAppropriateError, RieszEstimator, appropriate_check,
                           continuity_probe, eval_T, eval_T_eps, norm_bound_check, problem_tuple,
                           riesz_matrix, scalar_oracle, scalar_oracle_eps, spike_limit_study)
from stochmp.problems import lq_scalar
from stochmp.stochastics import ConfigurationError, McConfig, TimeGrid

GRID = TimeGrid(256)
MC = McConfig(paths=20_000, seed=7)
A0, B0, M0, NU = -0.5, 0.4, 1.5, 0.8


def scalar_tuple(a0=A0, b0=B0, m=M0, nu=NU, grid=GRID):
    pair = EvolutionOperatorPair(np.array([[a0]]), np.array([[b0]]), 0.25, 4.0)
    return AdjointTuple(pair, np.array([[m]]), grid, n_at=None if nu is None else np.array([[nu]]))


def discrete_oracle(a0, b0, m, nu, tau, grid):
    """Exact mean of the discrete scheme: per-step factor ``(1 + b²dt)/(1 − a dt)²``."""
    dt = grid.dt
    rho = (1 + b0 * b0 * dt) / (1 - a0 * dt) ** 2
    k0 = grid.index(tau)
    left = grid.steps - k0
    return m * rho**left + nu * dt * sum(rho**j for j in range(left))


@pytest.mark.parametrize("tau", [0.0, 0.25, 0.75])
def test_eval_T_matches_discrete_and_continuous_oracles(tau):
    val, se = eval_T(tau, [1.0], [1.0], scalar_tuple(), MC)
    assert abs(val - discrete_oracle(A0, B0, M0, NU, tau, GRID)) <= 4 * se
    exact = scalar_oracle(A0, B0, M0, NU, tau)
    assert abs(val - exact) <= max(3 * se, 0.01 * abs(exact))


def test_eval_T_is_bilinear_on_common_numbers():
    tup = scalar_tuple()
    one, _ = eval_T(0.5, [1.0], [1.0], tup, MC)
    scaled, _ = eval_T(0.5, [2.0], [-3.0], tup, MC)
    assert scaled == pytest.approx(-6.0 * one, rel=1e-12)


def test_riesz_matrix_decoupled_diagonal():
    a = np.diag([-0.5, -1.0])
    b = np.diag([0.4, 0.2])
    pair = EvolutionOperatorPair(a, b, 0.25, 4.0)
    m = np.diag([1.0, 2.0])
    op = riesz_matrix(0.25, AdjointTuple(pair, m, GRID, n_at=np.eye(2)), MC)
    assert op.symmetrized
    np.testing.assert_array_equal(op.matrix, op.matrix.T)
    assert abs(op.matrix[0, 1]) <= 4 * op.stderr[0, 1] + 1e-12
    for i in range(2):
        exact = scalar_oracle(a[i, i], b[i, i], m[i, i], 1.0, 0.25)
        assert abs(op.matrix[i, i] - exact) <= max(3 * op.stderr[i, i], 0.01 * exact)


def test_riesz_matrix_bilinear_form_matches_eval_T():
    rng = np.random.default_rng(0)
    a = -np.eye(2) + 0.2 * rng.standard_normal((2, 2))
    pair = EvolutionOperatorPair(a, 0.3 * np.eye(2), 0.25, 4.0)
    tup = AdjointTuple(pair, np.array([[1.0, 0.3], [0.3, 2.0]]), GRID)
    op = riesz_matrix(0.5, tup, MC)
    xi, zeta = np.array([1.0, -2.0]), np.array([0.5, 0.25])
    val, _ = eval_T(0.5, xi, zeta, tup, MC)
    assert op.bilinear(xi, zeta) == pytest.approx(val, rel=1e-10)
    assert op.quadratic_samples(xi).shape == (MC.paths,)


def test_t_eps_oracle():
    tup = scalar_tuple(nu=None)
    eps = 2**-4
    val, se = eval_T_eps(0.25, eps, [1.0], [1.0], tup, MC)
    exact = scalar_oracle_eps(A0, B0, M0, 0.25, eps)
    assert abs(val - exact) <= max(3 * se, 0.01 * exact)


def test_t_eps_needs_resolvable_eps():
    with pytest.raises(ConfigurationError, match="below the grid step"):
        eval_T_eps(0.25, GRID.dt / 2, [1.0], [1.0], scalar_tuple(), MC)


def test_spike_limit_study_converges():
    table = spike_limit_study(0.25, [1.0], [1.0], scalar_tuple(), [2**-3, 2**-4, 2**-5, 2**-6], MC)
    assert table.passed, table.rows
    gaps = [r[2] for r in table.rows]
    assert gaps[-1] < gaps[0]
    with pytest.raises(ConfigurationError):
        spike_limit_study(0.25, [1.0], [1.0], scalar_tuple(), [2**-4, 2**-3], MC)


def test_continuity_probe_shrinks():
    table = continuity_probe(0.25, [1.0], [1.0], scalar_tuple(), MC)
    assert table.passed
    assert table.rows[-1][1] < table.rows[0][1]


def test_norm_bound_against_closed_form():
    tup = scalar_tuple(nu=None)
    op = riesz_matrix(0.25, tup, MC)
    assert op.lambda_estimate == pytest.approx(M0**2)
    theta = 2 * A0 + B0**2
    rep = norm_bound_check(op, exact_ratio=np.exp(theta * 0.75))
    assert rep.passed, rep.details
    assert not norm_bound_check(op, exact_ratio=1.5 * np.exp(theta * 0.75)).passed


def test_appropriate_deterministic_tuple():
    rep = appropriate_check(scalar_tuple(), MC)
    assert rep.passed and rep.details["lambda"] == pytest.approx(M0**2 + NU**2, rel=1e-12)


def test_appropriate_detects_infinite_mean():
    pair = EvolutionOperatorPair(np.array([[-0.5]]), np.array([[0.0]]), 0.25, 4.0)
    # M = exp(W(1)²) so Λ₁ = exp(2 W(1)²) has infinite expectation
    heavy = AdjointTuple(pair, lambda ctx: np.exp(ctx.w[:, -1] ** 2)[:, None, None], GRID)
    light = AdjointTuple(pair, lambda ctx: np.exp(0.1 * ctx.w[:, -1] ** 2)[:, None, None], GRID)
    assert appropriate_check(light, MC).passed
    assert not appropriate_check(heavy, MC).passed


def test_non_finite_lambda_raises():
    pair = EvolutionOperatorPair(np.array([[-0.5]]), np.array([[0.0]]), 0.25, 4.0)
    bad = AdjointTuple(pair, lambda ctx: np.where(ctx.w[:, -1:, None] > 3.0, np.inf, 1.0), GRID)
    with pytest.raises(NotAppropriateError):
        eval_T(0.5, [1.0], [1.0], bad, MC)


def test_lq_problem_tuple_and_estimator():
    problem, _ = lq_scalar(a=-1.0, b=0.5, q=1.0, m=1.0)
    tup = problem_tuple(problem)
    assert tup.deterministic
    est = RieszEstimator(tau=0.5, paths=20_000, seed=1).fit(tup)
    exact = scalar_oracle(-1.0, 0.5, 1.0, 1.0, 0.5)
    assert abs(est.matrix_[0, 0] - exact) <= max(3 * est.stderr_[0, 0], 0.01 * exact)
    np.testing.assert_allclose(est.predict([[2.0]]), 4.0 * est.matrix_[0, 0])
    assert est.get_params()["tau"] == 0.5


def test_same_seed_reproducible():
    tup = scalar_tuple()
    one = riesz_matrix(0.25, tup, MC)
    two = riesz_matrix(0.25, tup, McConfig(paths=20_000, seed=7, block=3000))
    np.testing.assert_array_equal(one.matrix, two.matrix)
