import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stochmp.gelfand import (DimensionError, GelfandTriple, dual_norm_sq, h_inner, stiffness1d,
                             v_norm_sq)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def spd(n, seed):
    m = np.random.default_rng(seed).standard_normal((n, n))
    g = m @ m.T + n * np.eye(n)
    return 0.5 * (g + g.T)


def test_h_inner_examples():
    assert h_inner([1, 0], [1, 0]) == 1.0
    assert h_inner([3.0, -2.0], [0.0, 0.0]) == 0.0
    assert h_inner([1, 2], [3, -1]) == 1.0


def test_h_inner_dimension_mismatch():
    with pytest.raises(DimensionError):
        h_inner([1, 2], [1, 2, 3])


def test_v_norm_examples():
    assert v_norm_sq(GelfandTriple.identity(3), [1, 0, 0]) == 1.0
    assert v_norm_sq(GelfandTriple(np.diag([1.0, 4.0])), [0, 0]) == 0.0
    assert v_norm_sq(GelfandTriple(np.diag([1.0, 4.0])), [1, 1]) == 5.0


def test_dual_norm_examples():
    assert dual_norm_sq(GelfandTriple.identity(2), [1, 0]) == pytest.approx(1.0)
    assert dual_norm_sq(GelfandTriple.identity(2), [0, 0]) == 0.0
    assert dual_norm_sq(GelfandTriple(np.diag([1.0, 4.0])), [0, 2]) == pytest.approx(1.0)


def test_dimension_errors():
    t = GelfandTriple.identity(3)
    with pytest.raises(DimensionError):
        v_norm_sq(t, [1, 2])
    with pytest.raises(DimensionError):
        dual_norm_sq(t, [1, 2])


def test_gram_validation():
    with pytest.raises(ValueError):
        GelfandTriple(np.array([[1.0, 0.1], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        GelfandTriple(np.array([[1.0, 0.0], [0.0, -1.0]]))
    with pytest.raises(DimensionError):
        GelfandTriple(np.ones((2, 3)))


def test_laplacian_triple():
    t = GelfandTriple.laplacian1d(8)
    np.testing.assert_array_equal(t.v_gram, np.eye(8) + stiffness1d(8))
    assert t.lambda_min > 1.0
    assert t.embedding_constant == pytest.approx(np.sqrt(t.lambda_min))


def test_from_config():
    assert GelfandTriple.from_config({"dim": 8, "vGram": "laplacian1d"}).dim == 8
    t = GelfandTriple.from_config({"dim": 2, "vGram": [1, 0, 0, 4]})
    np.testing.assert_array_equal(t.v_gram, np.diag([1.0, 4.0]))
    with pytest.raises(DimensionError):
        GelfandTriple.from_config({"dim": 3, "vGram": [1, 0, 0, 4]})


def test_cauchy_schwarz_bulk():
    rng = np.random.default_rng(0)
    for n in (1, 2, 8, 32):
        t = GelfandTriple(spd(n, n)) if n < 8 else GelfandTriple.laplacian1d(n)
        x = rng.standard_normal((1000, n))
        f = rng.standard_normal((1000, n))
        lhs = h_inner(x, f) ** 2
        rhs = v_norm_sq(t, x) * dual_norm_sq(t, f)
        assert np.all(lhs <= rhs * (1 + 1e-12) + 1e-12)


@given(arrays(np.float64, 4, elements=finite), st.integers(0, 1000))
def test_dual_of_gram_image(x, seed):
    t = GelfandTriple(spd(4, seed))
    assert dual_norm_sq(t, t.v_gram @ x) == pytest.approx(v_norm_sq(t, x), rel=1e-9, abs=1e-9)


@given(arrays(np.float64, 8, elements=finite))
def test_h_norm_dominated_by_v_norm(x):
    t = GelfandTriple.laplacian1d(8)
    assert h_inner(x, x) <= v_norm_sq(t, x) / t.lambda_min * (1 + 1e-12) + 1e-12


@given(arrays(np.float64, 3, elements=finite), arrays(np.float64, 3, elements=finite))
def test_h_inner_symmetric(x, y):
    assert h_inner(x, y) == h_inner(y, x)
