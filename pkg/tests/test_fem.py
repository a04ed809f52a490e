import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jkofem.fem import (Discretization, UniformMesh, build_diff_operator, discrete_inner,
                        gauss_legendre_1d, l2_error, lagrange_matrices)
from jkofem.linsolve import pcg_solve

DEGREES = range(1, 7)


def square(n, k, bc="neumann", L=1.0):
    return Discretization(UniformMesh(-L, L, -L, L, n, n), k, bc)


# -- Gauss-Legendre -------------------------------------------------------

def test_gauss_one_point():
    t, w = gauss_legendre_1d(1)
    assert t[0] == 0.5 and w[0] == 1.0


def test_gauss_two_points():
    t, w = gauss_legendre_1d(2)
    np.testing.assert_allclose(t, [(3 - math.sqrt(3)) / 6, (3 + math.sqrt(3)) / 6], rtol=1e-15)
    np.testing.assert_allclose(w, [0.5, 0.5], rtol=1e-15)
    for m in range(4):
        assert abs(np.dot(w, t ** m) - 1.0 / (m + 1)) < 1e-15


def test_gauss_three_points_x5():
    t, w = gauss_legendre_1d(3)
    assert abs(np.dot(w, t ** 5) - 1 / 6) < 1e-14


def test_gauss_rejects_zero():
    with pytest.raises(ValueError):
        gauss_legendre_1d(0)


@pytest.mark.parametrize("n", range(1, 12))
def test_gauss_exactness(n):
    t, w = gauss_legendre_1d(n)
    assert np.all((t > 0) & (t < 1))
    assert abs(w.sum() - 1.0) < 1e-14
    for m in range(2 * n):
        assert abs(np.dot(w, t ** m) - 1.0 / (m + 1)) < 1e-14


# -- discrete inner product ----------------------------------------------

@pytest.mark.parametrize("k", [1, 2, 4])
def test_inner_examples(k):
    d = square(3, k)
    one = np.ones(d.n_quad)
    assert abs(discrete_inner(one, one, d.weights) - 4.0) < 1e-13
    assert abs(d.inner(d.x0, d.x0) - 4.0 / 3.0) < 1e-13
    assert d.inner(one, np.zeros(d.n_quad)) == 0.0


def test_inner_size_mismatch():
    d = square(2, 1)
    with pytest.raises(ValueError):
        discrete_inner(np.ones(3), np.ones(4), d.weights)


@pytest.mark.parametrize("k", DEGREES)
@settings(max_examples=15, deadline=None)
@given(data=st.data())
def test_quadrature_exactness(k, data):
    """Products of per-direction polynomials of degree <= 2k+1 integrate exactly."""
    seed = data.draw(st.integers(0, 2 ** 31))
    rng = np.random.default_rng(seed)
    xmin, ymin = rng.uniform(-2, 0, 2)
    w_, h_ = rng.uniform(0.5, 3, 2)
    nx, ny = rng.integers(1, 4, 2)
    d = Discretization(UniformMesh(xmin, xmin + w_, ymin, ymin + h_, int(nx), int(ny)), k)
    px = np.polynomial.Polynomial(rng.normal(size=2 * k + 2))
    py = np.polynomial.Polynomial(rng.normal(size=2 * k + 2))
    ix, iy = px.integ(), py.integ()
    exact = (ix(xmin + w_) - ix(xmin)) * (iy(ymin + h_) - iy(ymin))
    got = d.integrate(px(d.x0) * py(d.x1))
    scale = d.integrate(np.abs(px(d.x0) * py(d.x1)))
    assert abs(got - exact) <= 1e-12 * max(scale, 1e-300)


@pytest.mark.parametrize("k", DEGREES)
def test_kronecker_nodal_property(k):
    d = Discretization(UniformMesh(0, 2, 0, 1, 3, 2), k)
    t, _ = gauss_legendre_1d(k + 1)
    assert np.array_equal(lagrange_matrices(t, t)[0], np.eye(k + 1))
    u = np.random.default_rng(k).normal(size=d.n_quad)
    vals, x0, x1, _ = d.resample(u, k + 1)
    assert np.array_equal(vals, u)
    assert np.array_equal(x0, d.x0) and np.array_equal(x1, d.x1)
    # through physical coordinates the reference position is only recovered to roundoff
    np.testing.assert_allclose(d.evaluate(u, d.x0, d.x1), u, rtol=0, atol=1e-13)


@pytest.mark.parametrize("k", DEGREES)
def test_evaluate_reproduces_polynomials(k):
    d = Discretization(UniformMesh(-1, 1, 0, 2, 2, 3), k)
    f = lambda x, y: (1 + x) ** k - 0.5 * y ** k + x * y  # noqa: E731
    px = np.linspace(-1, 1, 7)
    py = np.linspace(0, 2, 5)
    X, Y = np.meshgrid(px, py)
    np.testing.assert_allclose(d.evaluate(d.sample(f), X, Y), f(X, Y), atol=1e-11)


# -- differential operator -----------------------------------------------

@pytest.mark.parametrize("k", DEGREES)
@pytest.mark.parametrize("bc", ["neumann", "periodic"])
def test_operator_constant(k, bc):
    op = build_diff_operator(UniformMesh(-1, 1, -1, 1, 3, 2), k, bc)
    d = op.disc
    val, dx, dy = op.apply(np.full(d.n_dof, 2.5))
    np.testing.assert_allclose(val, 2.5, rtol=1e-14)
    assert np.abs(dx).max() < 1e-12 and np.abs(dy).max() < 1e-12


@pytest.mark.parametrize("k", DEGREES)
def test_operator_linear_and_quadratic(k):
    d = square(3, k)
    op = d.diff_operator
    _, dx, dy = op.apply(d.interpolate_continuous(lambda x, y: x))
    np.testing.assert_allclose(dx, 1.0, atol=1e-12)
    assert np.abs(dy).max() < 1e-12
    if k >= 2:
        val, dx, _ = op.apply(d.interpolate_continuous(lambda x, y: x ** 2))
        np.testing.assert_allclose(dx, 2 * d.x0, atol=1e-12)
        np.testing.assert_allclose(val, d.x0 ** 2, atol=1e-13)


@pytest.mark.parametrize("k", DEGREES)
def test_operator_exact_on_qk(k):
    """E0, Dx, Dy reproduce values and derivatives of Q^k functions at the nodes."""
    d = Discretization(UniformMesh(0, 1, -1, 1, 2, 3), k)
    rng = np.random.default_rng(10 + k)
    a, b = rng.normal(size=k + 1), rng.normal(size=k + 1)
    p, q = np.polynomial.Polynomial(a), np.polynomial.Polynomial(b)
    val, dx, dy = d.diff_operator.apply(d.interpolate_continuous(lambda x, y: p(x) * q(y)))
    np.testing.assert_allclose(val, p(d.x0) * q(d.x1), atol=1e-11)
    np.testing.assert_allclose(dx, p.deriv()(d.x0) * q(d.x1), atol=1e-9)
    np.testing.assert_allclose(dy, p(d.x0) * q.deriv()(d.x1), atol=1e-9)


@pytest.mark.parametrize("k", [1, 3])
@pytest.mark.parametrize("bc", ["neumann", "periodic"])
def test_operator_matches_sparse_matrices(k, bc):
    d = Discretization(UniformMesh(0, 1, 0, 2, 3, 2), k, bc)
    op = d.diff_operator
    rng = np.random.default_rng(0)
    phi = rng.normal(size=d.n_dof)
    val, dx, dy = op.apply(phi)
    np.testing.assert_allclose(val, op.E0 @ phi, atol=1e-13)
    np.testing.assert_allclose(dx, op.Dx @ phi, atol=1e-12)
    np.testing.assert_allclose(dy, op.Dy @ phi, atol=1e-12)
    f0, fx, fy = rng.normal(size=(3, d.n_quad))
    ref = op.E0.T @ f0 + op.Dx.T @ fx + op.Dy.T @ fy
    np.testing.assert_allclose(op.apply_transpose(f0, fx, fy), ref, atol=1e-12)


@pytest.mark.parametrize("k", DEGREES)
def test_periodic_identification(k):
    d = Discretization(UniformMesh(-1, 1, 0, 1, 4, 2), k, "periodic")
    phi = d.interpolate_continuous(lambda x, y: np.sin(np.pi * x) + 0 * y)
    val = d.diff_operator.value(phi)
    y = np.linspace(0, 1, 5)
    left = d.evaluate(val, np.full_like(y, -1.0), y)
    right = d.evaluate(val, np.full_like(y, 1.0), y)
    np.testing.assert_allclose(left, right, atol=1e-13)


@pytest.mark.parametrize("k", DEGREES)
def test_mass_matrix_spd(k):
    d = Discretization(UniformMesh(0, 1, 0, 1, 3, 2), k)
    M = d.mass_matrix
    assert np.all(M.diagonal() > 0)
    assert abs(M - M.T).max() < 1e-14
    rng = np.random.default_rng(k)
    for _ in range(3):
        b = rng.normal(size=d.n_dof)
        x, rep = pcg_solve(M, b, tol=1e-12)
        assert rep.converged
        assert np.linalg.norm(M @ x - b) <= 1e-11 * np.linalg.norm(b)


def test_one_dimensional_mode_matches_full():
    """degree_y=0 on one cell equals the full space restricted to y-constant fields."""
    m = UniformMesh(-2, 2, 0, 1, 5, 1)
    d1 = Discretization(m, 3, degree_y=0)
    d2 = Discretization(m, 3)
    f = lambda x, y: np.cos(x) + 0 * y  # noqa: E731
    v1, dx1, _ = d1.diff_operator.apply(d1.interpolate_continuous(f))
    v2, dx2, _ = d2.diff_operator.apply(d2.interpolate_continuous(f))
    np.testing.assert_allclose(d1.integrate(v1 * dx1), d2.integrate(v2 * dx2), atol=1e-13)
    assert d1.n_quad == 5 * 4


def test_one_dimensional_mode_requires_single_cell():
    with pytest.raises(ValueError):
        Discretization(UniformMesh(0, 1, 0, 1, 2, 2), 2, degree_y=0)


def test_degree_zero_rejected():
    with pytest.raises(ValueError):
        square(2, 0)


# -- l2 error ------------------------------------------------------------

def test_l2_error_examples():
    d = square(2, 2)
    f = lambda x, y: 1 + x  # noqa: E731
    assert l2_error(d, d.sample(f), f) == 0.0
    assert abs(l2_error(d, np.zeros(d.n_quad), lambda x, y: 1.0 + 0 * x) - 2.0) < 1e-13
    assert abs(l2_error(d, np.ones(d.n_quad), f) - 2 / math.sqrt(3)) < 1e-13


@pytest.mark.parametrize("k", [1, 2, 3])
def test_l2_overintegration_rate(k):
    """Interpolating a smooth function converges at rate k+1 in the over-integrated norm."""
    f = lambda x, y: np.sin(2 * x) * np.cos(y)  # noqa: E731
    errs = []
    for n in (4, 8):
        d = square(n, k)
        errs.append(l2_error(d, d.sample(f), f, overintegrate=k + 4))
    assert abs(math.log2(errs[0] / errs[1]) - (k + 1)) < 0.3
