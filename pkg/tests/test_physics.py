import math

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from jkofem.fem import Discretization, UniformMesh
from jkofem.physics import (Convolver, EnergySpec, LogMeanMobility, PowerMobility, ReactionNetwork,
                            convolve, diffusion_term, energy_eval, log_mean)
from jkofem.scenarios import gray_scott_network, two_species

pos = st.floats(1e-6, 1e6, allow_nan=False, allow_infinity=False)


def square(n, k, L=1.0):
    return Discretization(UniformMesh(-L, L, -L, L, n, n), k)


# -- logarithmic mean -----------------------------------------------------

def test_log_mean_examples():
    assert log_mean(2.0, 2.0) == 2.0
    assert abs(log_mean(math.e, 1.0) - (math.e - 1)) < 1e-15
    oracle = float(mpmath.mpf(3) / mpmath.log(4))
    assert abs(log_mean(4.0, 1.0) - oracle) < 1e-15
    assert log_mean(0.0, 3.0) == 0.0


def test_log_mean_negative_rejected():
    with pytest.raises(ValueError):
        log_mean(-1.0, 1.0)


@settings(max_examples=300)
@given(pos, pos)
def test_log_mean_bounds_and_symmetry(x, y):
    v = log_mean(x, y)
    assert math.sqrt(x * y) * (1 - 1e-14) <= v <= 0.5 * (x + y) * (1 + 1e-14)
    assert abs(v - log_mean(y, x)) <= 1e-14 * v


@settings(max_examples=200)
@given(pos, pos, st.floats(1e-3, 1e3))
def test_log_mean_scaling(x, y, c):
    assert abs(log_mean(c * x, c * y) - c * log_mean(x, y)) <= 1e-13 * c * log_mean(x, y)


@settings(max_examples=200)
@given(st.floats(0.01, 100), st.floats(-1e-3, 1e-3))
def test_log_mean_near_diagonal(x, eps):
    """The series branch agrees with a high-precision closed form near x = y."""
    y = x * (1 + eps)
    assume(x != y)
    with mpmath.workdps(50):
        ref = float((mpmath.mpf(x) - mpmath.mpf(y)) / (mpmath.log(x) - mpmath.log(y)))
    assert abs(log_mean(x, y) - ref) <= 2e-15 * ref


# -- diffusion term -------------------------------------------------------

def test_diffusion_term_examples():
    assert diffusion_term(1.0, 1, 1.0) == (0.0, 1.0)
    assert diffusion_term(2.0, 2, 1.0) == (4.0, 4.0)
    assert diffusion_term(2.0, 3, 0.5) == (2.0, 3.0)
    v, d = diffusion_term(0.0, 1, 1.0)
    assert v == 0.0 and d == -math.inf
    assert diffusion_term(0.0, 2, 1.0)[0] == 0.0


def _fd(f, x, h):
    return (f(x + h) - f(x - h)) / (2 * h)


@pytest.mark.parametrize("spec", [EnergySpec(1.0, 1.0), EnergySpec(0.3, 2.0), EnergySpec(2.0, 3.5),
                                  EnergySpec(1.0, kappa=0.01)])
def test_energy_derivatives(spec):
    x = np.random.default_rng(1).uniform(0.01, 10, 200)
    h = 1e-6 * x
    e1, e2 = spec.derivs(x)
    np.testing.assert_allclose(_fd(spec.density, x, h), e1, rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(_fd(lambda r: spec.derivs(r)[0], x, h), e2, rtol=1e-6)


MOBILITIES = [PowerMobility(0.1, 0.0), PowerMobility(0.5, 1.0), PowerMobility(2.0, 0.5),
              PowerMobility(1.0, 2.0), LogMeanMobility(0.1, 1.0, 1.0, 1.0, 0.0),
              LogMeanMobility(0.5, 1.0, 1.0, 2.0, 1.0), LogMeanMobility(1.0, 3.0, 0.2, 1.0, 3.0),
              LogMeanMobility(1.0, 0.024, 2.4e-5, 1.0, 0.0)]


@pytest.mark.parametrize("mob", MOBILITIES, ids=repr)
def test_mobility_derivatives(mob):
    x = np.random.default_rng(2).uniform(0.01, 10, 200)
    h = 1e-6 * x
    v, d1, d2 = mob.derivs(x)
    np.testing.assert_allclose(mob.value(x), v)
    np.testing.assert_allclose(_fd(mob.value, x, h), d1, rtol=1e-6, atol=1e-10)
    np.testing.assert_allclose(_fd(lambda r: mob.derivs(r)[1], x, h), d2, rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("mob", MOBILITIES[4:], ids=repr)
def test_log_mean_mobility_value(mob):
    x = np.array([0.05, 0.7, 1.0, 4.0])
    ref = mob.c * log_mean(mob.A * x ** mob.alpha, mob.B * x ** mob.beta)
    np.testing.assert_allclose(mob.value(x), ref, rtol=1e-13)


def test_log_mean_concavity_flag():
    assert LogMeanMobility(1.0, 1.0, 1.0, 1.0, 0.0).concave
    assert not LogMeanMobility(1.0, 1.0, 1.0, 2.0, 1.0).concave
    assert PowerMobility(1.0, 0.5).concave and not PowerMobility(1.0, 2.0).concave


# -- energy ---------------------------------------------------------------

def test_energy_examples():
    d = square(2, 3)
    one = np.ones(d.n_quad)
    # U_1 = rho log rho vanishes at 1; the entropy rho(log rho - 1) gives -1 per unit area
    assert abs(energy_eval(EnergySpec(1.0, 1.0), d, one)) < 1e-13
    assert abs(energy_eval(EnergySpec(1.0, kappa=1.0), d, one) + 4.0) < 1e-13
    assert abs(energy_eval(EnergySpec(potential=lambda x, y: x ** 2), d, one) - 4 / 3) < 1e-13
    assert energy_eval(EnergySpec(1.0, 2.0, potential=lambda x, y: x), d, np.zeros(d.n_quad)) == 0.0


def test_energy_needs_convolution():
    d = square(2, 2)
    with pytest.raises(ValueError):
        energy_eval(EnergySpec(kernel=lambda x, y: x * 0), d, np.ones(d.n_quad))


def test_energy_spec_validation():
    with pytest.raises(ValueError):
        EnergySpec(alpha=-1.0)
    with pytest.raises(ValueError):
        EnergySpec(m=0.5)


# -- reaction networks ----------------------------------------------------

def test_reaction_mobility_examples():
    net = two_species().network
    ref = float(mpmath.mpf("0.9") / mpmath.log(10))
    assert abs(net.reaction_mobility(0, np.array([1.0, 1.0])) - ref) < 1e-15
    assert net.reaction_mobility(0, np.zeros(2)) == 0.0
    gs = gray_scott_network()
    rho = np.array([1.0, 0.15, 1.0, 1000.0])
    assert abs(gs.reaction_mobility(2, rho) - 0.024) < 1e-15


def test_two_species_structure():
    net = two_species().network
    np.testing.assert_array_equal(net.nu, [[1, -1]])
    np.testing.assert_array_equal(net.nu.T @ net.nu, [[1, -1], [-1, 1]])
    assert net.stoich_apply([1.0, 2.0])[0] == -1.0


def test_gray_scott_detailed_balance():
    gs = gray_scott_network()
    assert gs.stoich_apply([0.0, 5.0, 3.0, 0.0])[1] == 2.0
    np.testing.assert_array_equal(gs.stoich_apply(np.zeros(4)), 0.0)
    np.testing.assert_allclose(gs.nu @ np.log(gs.kappa), np.log(gs.k_plus / gs.k_minus), rtol=1e-13)
    # kappa_i rho_i = 1 is an equilibrium of every reaction
    eq = 1.0 / gs.kappa
    np.testing.assert_allclose(gs.equilibrium_residual(eq), 0.0, atol=1e-12 * eq.max())


def test_least_norm_kappa():
    net = ReactionNetwork([[1, 0], [0, 1]], [[0, 1], [0, 0]], [2.0, 3.0], [1.0, 1.0], [1.0, 1.0])
    np.testing.assert_allclose(net.nu @ np.log(net.kappa), np.log([2.0, 3.0]), rtol=1e-13)


def test_inconsistent_kappa_rejected():
    with pytest.raises(ValueError):
        ReactionNetwork([[1, 0]], [[0, 1]], 2.0, 1.0, [1.0, 1.0], kappa=[1.0, 1.0])


def test_species_reaction_mobility_matches_full():
    gs = gray_scott_network()
    rng = np.random.default_rng(3)
    rho = rng.uniform(0.1, 2.0, size=(4, 7))
    for i in range(4):
        for p in gs.reactions_of(i):
            mob = gs.species_reaction_mobility(p, i, rho)
            np.testing.assert_allclose(mob.value(rho[i]), gs.reaction_mobility(p, rho), rtol=1e-12)


# -- convolution ----------------------------------------------------------

def _smooth(x, y):
    return np.exp(-(x ** 2 + y ** 2))


def _singular(x, y):
    return np.log(np.hypot(x, y))


def test_convolve_trivial():
    d = square(3, 2)
    rho = 1.0 + d.x0 ** 2
    mass = d.integrate(rho)
    np.testing.assert_allclose(convolve(d, lambda x, y: 2.0 + 0 * x, rho), 2.0 * mass, rtol=1e-13)
    assert np.all(convolve(d, lambda x, y: 0 * x, rho) == 0.0)


def test_convolve_case5_center():
    """(W*1)(0) for the Gaussian kernel on [-4,4]^2 by a direct double-sum oracle."""
    d = Discretization(UniformMesh(-4, 4, -4, 4, 8, 8), 3)
    out = convolve(d, lambda x, y: -np.exp(-(x ** 2 + y ** 2)) / np.pi, np.ones(d.n_quad))
    f = Discretization(UniformMesh(-4, 4, -4, 4, 32, 32), 5)
    target = np.array([0.0, 0.0])
    ref = np.sum(-np.exp(-((f.x0 - target[0]) ** 2 + (f.x1 - target[1]) ** 2)) / np.pi * f.weights)
    assert abs(ref + 1.0) < 1e-6
    val = d.evaluate(out, np.array([0.0]), np.array([0.0]))[0]
    assert abs(val - ref) < 1e-5


@pytest.mark.parametrize("n", [1, 2, 4, 8])
@pytest.mark.parametrize("k", [1, 2, 3])
@pytest.mark.parametrize("singular", [False, True])
def test_fft_matches_direct(n, k, singular):
    d = Discretization(UniformMesh(-1.5, 1.5, -1, 1, n, max(1, n // 2)), k)
    rho = np.random.default_rng(n * 10 + k).uniform(0, 2, d.n_quad)
    W = _singular if singular else _smooth
    a = Convolver(d, W, singular, "fft")(rho)
    b = Convolver(d, W, singular, "direct")(rho)
    assert np.abs(a - b).max() <= 1e-11 * np.abs(b).max()


@pytest.mark.parametrize("singular", [False, True])
def test_convolution_symmetry(singular):
    d = square(4, 2)
    rho = 1.0 + np.cos(d.x0) * (1 + d.x1 ** 2)  # even in x0 and in x1
    out = convolve(d, _singular if singular else _smooth, rho, singular)
    img = out.reshape(d.qshape)
    np.testing.assert_allclose(img, img[:, ::-1], rtol=1e-12, atol=1e-12 * np.abs(img).max())
    np.testing.assert_allclose(img, img[::-1, :], rtol=1e-12, atol=1e-12 * np.abs(img).max())


def test_convolver_rejects_bad_mode():
    with pytest.raises(ValueError):
        Convolver(square(2, 1), _smooth, mode="gpu")
