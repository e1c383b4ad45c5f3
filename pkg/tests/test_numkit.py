import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsebif.errors import DivergedTrajectory, InvalidInput, OutOfRange
from sparsebif.numkit import (Rng, TimeGrid, central_diff, eval_spline, least_squares,
                              natural_cubic_spline, random_orthogonal, rk4_integrate, thin_svd)


def test_timegrid_samples():
    g = TimeGrid(1.0, 0.5, 5)
    assert np.array_equal(g.times(), [1.0, 1.5, 2.0, 2.5, 3.0])
    assert g.t_end == 3.0
    assert TimeGrid.span(0.0, 1.0, 0.1).count == 11
    with pytest.raises(InvalidInput):
        TimeGrid(0.0, 0.0, 5)
    with pytest.raises(InvalidInput):
        TimeGrid(0.0, 0.1, 1)


def test_svd_identity_and_diagonal():
    _, s, _ = thin_svd(np.eye(3))
    assert np.allclose(s, 1.0)
    u, s, vt = thin_svd(np.diag([1.0, 3.0, 2.0]))
    assert np.allclose(s, [3, 2, 1])
    assert np.allclose(np.abs(u), np.abs(vt.T))
    assert np.allclose(np.abs(u).sum(axis=0), 1.0)


def test_svd_rejects_nonfinite():
    a = np.ones((3, 3))
    a[1, 1] = np.nan
    with pytest.raises(InvalidInput):
        thin_svd(a)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 60), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_svd_roundtrip(rows, cols, seed):
    a = Rng(seed).normal((rows, cols))
    u, s, vt = thin_svd(a)
    assert np.linalg.norm(a - (u * s) @ vt) <= 1e-10 * np.linalg.norm(a)
    assert np.all(np.diff(s) <= 0) and np.all(s >= 0)
    k = s.size
    assert np.allclose(u.T @ u, np.eye(k), atol=1e-10)
    assert np.allclose(vt @ vt.T, np.eye(k), atol=1e-10)


def test_svd_large():
    a = Rng(1).normal((500, 200))
    u, s, vt = thin_svd(a)
    assert np.linalg.norm(a - (u * s) @ vt) / np.linalg.norm(a) < 1e-10


def test_least_squares_examples():
    assert np.allclose(least_squares(np.eye(2), [[1.0], [2.0]]), [[1], [2]])
    assert np.allclose(least_squares([[1.0], [1.0]], [[2.0], [4.0]]), [[3]])
    assert np.allclose(least_squares([[1.0]], [[1.0]], ridge=1.0), [[0.5]])
    with pytest.raises(InvalidInput):
        least_squares(np.eye(2), np.ones((3, 1)))


def test_least_squares_min_norm():
    a = np.array([[1.0, 1.0]])
    x = least_squares(a, [[2.0]])
    assert np.allclose(x, [[1.0], [1.0]])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_least_squares_normal_equations(seed):
    r = Rng(seed)
    a = r.normal((30, 6))
    b = r.normal((30, 2))
    x = least_squares(a, b)
    res = a.T @ a @ x - a.T @ b
    assert np.linalg.norm(res) <= 1e-8 * np.linalg.norm(a.T @ b)


def test_central_diff_linear_and_quadratic():
    t = np.arange(0, 1.0001, 0.1)
    assert np.allclose(central_diff(t, 0.1), 1.0, atol=1e-12)
    t = np.linspace(0, 1, 101)
    d = central_diff(t ** 2, 0.01)
    assert np.max(np.abs(d - 2 * t)) < 1e-10
    with pytest.raises(InvalidInput):
        central_diff(np.zeros((2, 1)), 0.1)


def test_central_diff_sin():
    t = np.arange(0, 2.0, 1e-3)
    d = central_diff(np.sin(t)[:, None], 1e-3)[:, 0]
    assert np.max(np.abs(d - np.cos(t))) < 1e-6


def test_spline_linear_and_knots():
    g = TimeGrid(0.0, 0.5, 9)
    y = np.column_stack([2 * g.times() + 1, g.times() ** 3])
    s = natural_cubic_spline(g, y)
    tt = np.linspace(0, 4, 77)
    assert np.allclose(eval_spline(s, tt)[:, 0], 2 * tt + 1, atol=1e-12)
    knots = eval_spline(s, g.times())
    assert np.array_equal(knots, y)
    assert np.allclose(s(np.array([0.0, 4.0]), nu=2), 0.0, atol=1e-10)
    with pytest.raises(OutOfRange):
        eval_spline(s, 4.5)


def test_spline_sin():
    g = TimeGrid(0.0, 2 * np.pi / 100, 101)
    s = natural_cubic_spline(g, np.sin(g.times())[:, None])
    mid = g.times()[:-1] + g.dt / 2
    assert np.max(np.abs(eval_spline(s, mid)[:, 0] - np.sin(mid))) < 1e-5


def test_rk4_examples():
    g = TimeGrid(0.0, 0.01, 101)
    y = rk4_integrate(lambda t, y, p: np.zeros_like(y), np.array([1.0, 2.0]), g)
    assert np.array_equal(y, np.tile([1.0, 2.0], (101, 1)))
    y = rk4_integrate(lambda t, y, p: -y, np.array([1.0]), g)
    assert abs(y[-1, 0] - np.exp(-1)) < 1e-9
    with pytest.raises(DivergedTrajectory) as info:
        rk4_integrate(lambda t, y, p: 1e200 * y, np.array([1.0]), TimeGrid(0.0, 1.0, 50))
    assert info.value.last_valid >= 0
    assert np.all(np.isfinite(info.value.partial))


def test_rk4_fourth_order():
    errs = []
    for n in (20, 40):
        y = rk4_integrate(lambda t, y, p: -y, np.array([1.0]), TimeGrid(0.0, 2.0 / n, n + 1))
        errs.append(abs(y[-1, 0] - np.exp(-2.0)))
    assert 12 <= errs[0] / errs[1] <= 20


def test_random_orthogonal():
    q = random_orthogonal(4, 4, Rng(3))
    assert np.max(np.abs(q.T @ q - np.eye(4))) < 1e-12
    c = random_orthogonal(7, 1, Rng(3))
    assert abs(np.linalg.norm(c) - 1) < 1e-12
    assert np.array_equal(random_orthogonal(9, 3, Rng(5)), random_orthogonal(9, 3, Rng(5)))
    with pytest.raises(InvalidInput):
        random_orthogonal(2, 3, Rng(0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**63 - 1), st.integers(1, 30))
def test_random_orthogonal_property(seed, cols):
    q = random_orthogonal(40, cols, Rng(seed))
    assert np.max(np.abs(q.T @ q - np.eye(cols))) < 1e-12


def test_rng_determinism_and_spawn():
    a, b = Rng(11), Rng(11)
    assert np.array_equal(a.normal(5), b.normal(5))
    c1 = [r.uniform(size=3) for r in Rng(2).spawn(3)]
    c2 = [r.uniform(size=3) for r in Rng(2).spawn(3)]
    assert all(np.array_equal(x, y) for x, y in zip(c1, c2))
    assert not np.array_equal(c1[0], c1[1])
