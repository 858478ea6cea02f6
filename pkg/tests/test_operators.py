import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stochmp.gelfand import GelfandTriple, stiffness1d
from stochmp.operators import (EvolutionOperatorPair, OperatorDataError, check_coercivity,
                               check_quasi_skew, laplacian1d, parse_operator, quasi_skew_bound,
                               sampled_quadratic_max, skew_decompose, transport1d)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_coercivity_forced():
    t = GelfandTriple(np.diag([1.0, 3.0]))
    pair = EvolutionOperatorPair(-t.v_gram, np.zeros((2, 2)), 1.0, 1.0)
    rep = check_coercivity(pair, t)
    assert rep.passed and rep.exact_margin >= 0


def test_no_dissipation_fails():
    t = GelfandTriple.identity(2)
    pair = EvolutionOperatorPair(np.zeros((2, 2)), np.zeros((2, 2)), 1.0, 0.0)
    rep = check_coercivity(pair, t)
    assert not rep.passed
    assert rep.exact_margin == pytest.approx(-1.0)


def test_laplacian_with_transport_noise():
    n = 8
    t = GelfandTriple.laplacian1d(n)
    a = laplacian1d(n)
    stiff = stiffness1d(n)
    b_unit = transport1d(n, 1.0)
    # largest c with c² BᵀB ≤ ½ stiffness
    lam = np.linalg.eigvalsh(np.linalg.solve(np.linalg.cholesky(stiff), np.linalg.solve(
        np.linalg.cholesky(stiff), b_unit.T @ b_unit).T))
    c = np.sqrt(0.5 / lam.max())
    pair = EvolutionOperatorPair(a, c * b_unit, 0.25, 4.0)
    rep = check_coercivity(pair, t, samples=2000)
    sym = -0.25 * t.v_gram + 4.0 * np.eye(n) - 0.5 * (a + a.T) - c * c * b_unit.T @ b_unit
    assert rep.exact_margin == pytest.approx(np.linalg.eigvalsh(sym)[0], rel=1e-12)
    assert rep.passed
    assert rep.margin >= rep.exact_margin - 1e-10


def test_boundedness_ratio_reported():
    t = GelfandTriple.laplacian1d(8)
    s = np.linalg.eigvalsh(stiffness1d(8))
    pair = EvolutionOperatorPair(laplacian1d(8), np.zeros((8, 8)), 0.25, 0.5)
    rep = check_coercivity(pair, t)
    # AᵀG⁻¹A against G has eigenvalues s²/(1+s)² for stiffness eigenvalues s
    assert rep.details["bound_ratio"] == pytest.approx(np.max(s**2 / (1 + s) ** 2), rel=1e-10)
    assert not rep.details["bounded"] and not rep.passed


def test_non_finite_operator():
    with pytest.raises(OperatorDataError):
        EvolutionOperatorPair(np.array([[np.nan]]), np.zeros((1, 1)), 1.0, 1.0)


def test_time_dependent_pair():
    pair = EvolutionOperatorPair(lambda t: -(1 + t) * np.eye(2), lambda t: 0.1 * t * np.eye(2), 0.5, 4.0)
    rep = check_coercivity(pair, GelfandTriple.identity(2), times=np.linspace(0, 1, 5))
    assert rep.passed
    assert not pair.is_constant and pair.dim == 2


def test_quasi_skew_examples():
    s = np.array([[0.0, 2.0], [-2.0, 0.0]])
    rep = check_quasi_skew(s, 0.1)
    assert rep.passed and rep.details["bound"] == 0.0
    rep = check_quasi_skew(np.eye(2), 0.5)
    assert not rep.passed and rep.details["bound"] == pytest.approx(1.0)
    rep = check_quasi_skew(np.array([[0.0, 1.0], [0.0, 0.0]]), 0.5)
    assert rep.passed and rep.details["bound"] == pytest.approx(0.5)


def test_quasi_skew_non_square():
    with pytest.raises(OperatorDataError):
        check_quasi_skew(np.ones((2, 3)), 1.0)


def test_skew_decompose_examples():
    b = np.array([[1.0, 2.0], [0.0, 1.0]])
    s, t = skew_decompose(b)
    np.testing.assert_array_equal(s, [[0, 1], [-1, 0]])
    np.testing.assert_array_equal(t, [[1, 1], [1, 1]])
    sym = np.array([[2.0, 1.0], [1.0, 3.0]])
    s, t = skew_decompose(sym)
    assert not s.any()
    np.testing.assert_array_equal(t, sym)
    skew = np.array([[0.0, 1.5], [-1.5, 0.0]])
    s, t = skew_decompose(skew)
    np.testing.assert_array_equal(s, skew)
    assert not t.any()


@given(arrays(np.float64, (4, 4), elements=finite))
def test_decomposition_round_trip(b):
    s, t = skew_decompose(b)
    np.testing.assert_allclose(s + t, b, atol=1e-15)
    np.testing.assert_array_equal(s.T, -s)
    np.testing.assert_array_equal(t.T, t)


@given(arrays(np.float64, (3, 3), elements=finite))
def test_quasi_skew_at_exact_bound(b):
    assert check_quasi_skew(b, quasi_skew_bound(b)).passed


@given(arrays(np.float64, (3, 3), elements=finite), st.floats(0.0, 10.0), st.floats(0.1, 10.0))
def test_quasi_skew_scaling(b, k, c):
    assert check_quasi_skew(c * b, c * k).passed == check_quasi_skew(b, k).passed


@given(arrays(np.float64, (3, 3), elements=finite))
def test_sampled_max_is_lower_bound(b):
    assert sampled_quadratic_max(b) <= quasi_skew_bound(b) + 1e-10


def test_sampled_max_with_opposite_extremes():
    # eigenvalues of equal magnitude and opposite sign must not cancel
    q, _ = np.linalg.qr(np.random.default_rng(1).standard_normal((8, 8)))
    t = q @ np.diag([3.0, -2.999, 1.0, 0.5, 0.0, -0.5, -1.0, 0.2]) @ q.T
    assert abs(sampled_quadratic_max(t) - 3.0) < 1e-6


@given(arrays(np.float64, (8, 8), elements=finite))
def test_sampled_max_close_to_exact(b):
    assert abs(sampled_quadratic_max(b) - quasi_skew_bound(b)) <= 1e-3 * (1.0 + quasi_skew_bound(b))


def test_parse_operator():
    np.testing.assert_array_equal(parse_operator("laplacian1d(8, dirichlet)"), laplacian1d(8))
    np.testing.assert_array_equal(parse_operator("transport1d(8, 0.3)"), transport1d(8, 0.3))
    np.testing.assert_array_equal(parse_operator("dense([1, 2], [3, 4])"), [[1, 2], [3, 4]])
    np.testing.assert_array_equal(parse_operator(-0.5), [[-0.5]])
    with pytest.raises(ValueError):
        parse_operator("wave(3)")


def test_transport_is_skew():
    b = transport1d(8, 0.7)
    np.testing.assert_array_equal(b, -b.T)
