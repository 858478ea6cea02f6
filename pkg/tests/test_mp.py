import numpy as np
import pytest

from stochmp.bsee import solve_adjoint_regression
from stochmp.controls import Control, ControlDomainError
from stochmp.mp import (MpResidualTable, approx_x2_by_spike_z, check_maximum_principle, cost,
                        expansion_check, hamiltonian, second_order_term, spike_control,
                        variational_inequality)
from stochmp.problems import lq_scalar, nonlinear_scalar
from stochmp.riesz import RieszOperator, problem_tuple, riesz_matrix
from stochmp.see import solve_state
from stochmp.stochastics import ConfigurationError, McConfig, OffGridError, TimeGrid, sample_ensemble

GRID = TimeGrid(128)
EPS = [2**-3, 2**-4, 2**-5, 2**-6]


def test_hamiltonian_by_hand():
    problem = nonlinear_scalar(alpha=0.5, beta=1.0, gamma=0.3, delta=0.5, q=1.0, r=1.0)
    x, u, p, q = 0.4, 0.5, 2.0, -1.0
    expect = (0.5 * x * x + 0.5 * u * u + p * (0.5 * np.sin(x) + u * np.cos(x))
              + q * (0.3 * np.sin(x) + 0.5 * u))
    assert hamiltonian(0.0, np.array([x]), [u], [p], [q], problem) == pytest.approx(expect, rel=1e-14)
    batch = hamiltonian(0.0, np.array([[x], [x]]), [u], [p], [q], problem)
    np.testing.assert_allclose(batch, expect, rtol=1e-14)
    with pytest.raises(ControlDomainError):
        hamiltonian(0.0, np.array([x]), [2.0], [p], [q], problem)


def test_spike_control_replaces_interval_only():
    ubar = Control.constant([0.25], GRID)
    ue = spike_control(ubar, 0.5, 1 / 16, [1.0], GRID)
    sl = GRID.spike_slice(0.5, 1 / 16)
    assert (sl.start, sl.stop) == (64, 72)
    assert np.all(ue.values[..., sl, :] == 1.0)
    mask = np.ones(GRID.steps + 1, bool)
    mask[sl] = False
    assert np.all(ue.values[..., mask, :] == 0.25)
    assert ue.spike.tau == 0.5 and ue.spike.eps == 1 / 16
    assert spike_control(ubar, 0.5, 0.0, [1.0], GRID) is ubar
    with pytest.raises(ConfigurationError):
        spike_control(Control(feedback=lambda t, x: x), 0.5, 1 / 16, [1.0], GRID)
    with pytest.raises(ControlDomainError):
        spike_control(ubar, 0.5, 1 / 16, [5.0], GRID, nonlinear_scalar().control_set)
    with pytest.raises(OffGridError):
        spike_control(ubar, 0.5, 0.1, [1.0], GRID)


def test_second_order_term():
    p = np.array([[2.0, 0.5], [0.5, -1.0]])
    g = np.array([1.0, 2.0])
    assert second_order_term(g, p) == pytest.approx(0.5 * (2.0 + 2 * 0.5 * 2.0 - 4.0))
    op = RieszOperator(0.5, p, np.zeros((2, 2)), 1.0)
    assert second_order_term(g, op) == second_order_term(g, p)
    with pytest.raises(ValueError):
        second_order_term([1.0], p)


def test_mc_cost_matches_riccati():
    problem, sol = lq_scalar()
    j, se = cost(problem, Control(feedback=sol.control), McConfig(paths=20_000, seed=9), TimeGrid(512))
    assert abs(j - sol.cost) <= max(3 * se, 0.01 * sol.cost)


def test_residual_table_rule():
    rows = [(0.25, np.array([1.0]), 0.5, -0.2, 0.0, 0.01),
            (0.5, np.array([-1.0]), 0.1, -0.3, 0.0, 0.05)]
    table = MpResidualTable(rows, 1e-6)
    assert [r[4] for r in table.rows] == pytest.approx([0.3, -0.2])
    assert not table.passed
    assert table.worst_row()[0] == 0.5
    loose = MpResidualTable([(0.5, np.array([0.0]), 0.1, -0.2, 0.0, 0.05)], 1e-6)
    assert loose.passed
    assert table.as_array().shape == (2, 6)


@pytest.fixture(scope="module")
def lq_problem():
    return lq_scalar()


def test_optimal_lq_control_passes(lq_problem):
    problem, sol = lq_problem
    verdict = check_maximum_principle(problem, Control(feedback=sol.control), McConfig(paths=5000, seed=0),
                                      GRID, tau_grid=(0.25, 0.5), u_grid=np.array([[-0.3], [0.0], [0.3]]))
    assert verdict.passed
    assert set(verdict.riesz) == {0.25, 0.5}


def test_doubled_lq_control_fails_and_costs_more(lq_problem):
    problem, sol = lq_problem
    mc = McConfig(paths=5000, seed=0)
    args = dict(grid=GRID, tau_grid=(0.25, 0.5), u_grid=np.array([[-0.3], [0.0], [0.3]]))
    good = check_maximum_principle(problem, Control(feedback=sol.control), mc, **args)
    bad = check_maximum_principle(problem, Control(feedback=lambda t, x: 2.0 * sol.control(t, x)), mc, **args)
    assert not bad.passed
    assert bad.table.worst_row()[4] < 0
    gap = bad.cost[0] - good.cost[0]
    assert gap > 3 * np.hypot(bad.cost[1], good.cost[1])


def test_riccati_adjoint_route_passes(lq_problem):
    problem, sol = lq_problem
    verdict = check_maximum_principle(problem, Control(feedback=sol.control), McConfig(paths=2000, seed=1),
                                      GRID, tau_grid=(0.5,), u_grid=np.array([[-0.3], [0.3]]),
                                      adjoint="riccati")
    assert verdict.passed and verdict.adjoint.method == "riccati-oracle"


def test_expansion_remainders_decrease():
    problem = nonlinear_scalar()
    table = expansion_check(problem, Control.constant([0.0], GRID), 0.5, [1.0], EPS,
                            McConfig(paths=5000, seed=1), GRID)
    assert table.passed, table.rows
    assert len(table.rows) == len(EPS)


def test_x2_routes_coincide_without_state_dependent_delta():
    # with beta = 0 the control jump in g does not depend on x and f carries no control
    problem = nonlinear_scalar(beta=0.0)
    table = approx_x2_by_spike_z(problem, Control.constant([0.0], GRID), 0.5, [1.0], EPS[:3],
                                 McConfig(paths=2000, seed=1), GRID)
    for row in table.rows:
        assert row[1] < 1e-30 and row[5] == 0.0


def test_route_gap_is_first_order_in_eps():
    problem = nonlinear_scalar(beta=1.0)
    table = approx_x2_by_spike_z(problem, Control.constant([0.0], GRID), 0.5, [1.0], EPS,
                                 McConfig(paths=5000, seed=1), GRID)
    gaps = [r[5] for r in table.rows]
    assert all(0.35 < b / a < 0.65 for a, b in zip(gaps, gaps[1:]))


def test_quadratic_term_approaches_riesz_form():
    problem = nonlinear_scalar()
    mc = McConfig(paths=20_000, seed=2)
    ubar = Control.constant([0.0], GRID)
    w = sample_ensemble(GRID, mc)
    bar = solve_state(problem, ubar, w)
    adj = solve_adjoint_regression(problem, bar)
    op = riesz_matrix(0.5, problem_tuple(problem, bar, adj), mc, keep_samples=False)
    coarse = variational_inequality(problem, ubar, 0.5, [1.0], 2**-3, mc, GRID, op)
    fine = variational_inequality(problem, ubar, 0.5, [1.0], 2**-5, mc, GRID, op)
    target = fine["riesz_quadratic"]
    assert abs(fine["quadratic"] - target) < abs(coarse["quadratic"] - target)
    assert abs(fine["quadratic"] - target) < 0.1 * target
    assert fine["rhs"] == pytest.approx(fine["first"] + 0.5 * fine["quadratic"], rel=1e-12)
