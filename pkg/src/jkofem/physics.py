"""Energies, mobilities, reaction networks and the interaction convolution."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .fem import Discretization, gauss_legendre_1d, lagrange_matrices

RHO_MIN = 1e-12


# -- logarithmic mean ----------------------------------------------------

def log_mean(x, y):
    """Logarithmic mean (x - y)/(log x - log y), extended by x on the diagonal."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x < 0) or np.any(y < 0):
        raise ValueError("log_mean needs nonnegative arguments")
    with np.errstate(divide="ignore", invalid="ignore"):
        zero = (x == 0) | (y == 0)
        xs = np.where(zero, 1.0, x)
        ys = np.where(zero, 1.0, y)
        out = np.sqrt(xs * ys) * _sinhc(np.log(xs) - np.log(ys))
        out = np.where(zero, 0.0, out)
    return out[()] if out.ndim == 0 else out


def _sinhc(x):
    """sinh(x/2)/(x/2), smooth and even."""
    y = 0.5 * np.asarray(x, dtype=float)
    y2 = y * y
    small = np.abs(y) < 0.1
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        exact = np.sinh(y) / np.where(small, 1.0, y)
    series = 1.0 + y2 / 6.0 * (1.0 + y2 / 20.0 * (1.0 + y2 / 42.0 * (1.0 + y2 / 72.0)))
    return np.where(small, series, exact)


def _sinhc_derivs(x):
    """First and second derivatives of sinh(x/2)/(x/2) with respect to x."""
    y = 0.5 * np.asarray(x, dtype=float)
    y2 = y * y
    small = np.abs(y) < 0.1
    ys = np.where(small, 1.0, y)
    with np.errstate(over="ignore", invalid="ignore"):
        sh, ch = np.sinh(ys), np.cosh(ys)
        d1 = (ys * ch - sh) / ys ** 2
        d2 = sh / ys - 2.0 * ch / ys ** 2 + 2.0 * sh / ys ** 3
    s1 = y / 3.0 + y * y2 / 30.0 + y * y2 * y2 / 840.0 + y * y2 ** 3 / 45360.0
    s2 = 1.0 / 3.0 + y2 / 10.0 + y2 * y2 / 168.0 + y2 ** 3 / 6480.0
    d1 = np.where(small, s1, d1)
    d2 = np.where(small, s2, d2)
    return 0.5 * d1, 0.25 * d2


# -- mobilities ----------------------------------------------------------

class Mobility:
    """Scalar mobility V(rho) >= 0 with first and second derivatives."""

    concave = False

    def value(self, rho):
        return self.derivs(rho)[0]

    def derivs(self, rho):  # -> (V, V', V'')
        raise NotImplementedError


@dataclass
class PowerMobility(Mobility):
    """c * rho**gamma."""

    c: float
    gamma: float = 1.0

    @property
    def concave(self):
        return 0.0 <= self.gamma <= 1.0

    def derivs(self, rho):
        c, g = self.c, self.gamma
        rho = np.asarray(rho, dtype=float)
        if g == 0.0:
            z = np.zeros_like(rho)
            return c + z, z, z
        if g == 1.0:
            z = np.zeros_like(rho)
            return c * rho, c + z, z
        with np.errstate(divide="ignore", invalid="ignore"):
            v = c * rho ** g
            d1 = c * g * rho ** (g - 1.0)
            d2 = c * g * (g - 1.0) * rho ** (g - 2.0)
        return v, d1, d2


@dataclass
class LogMeanMobility(Mobility):
    """c * l(A * rho**alpha, B * rho**beta) with l the logarithmic mean.

    ``A`` and ``B`` may be arrays (one value per node); this is how reaction
    mobilities are seen by a single species while the others are frozen.
    Arguments are floored at ``RHO_MIN`` before any logarithm.
    """

    c: float
    A: float | np.ndarray = 1.0
    B: float | np.ndarray = 1.0
    alpha: float = 1.0
    beta: float = 0.0

    @property
    def concave(self):
        # l is concave and nondecreasing in each argument, so concave powers keep it concave
        return 0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0

    def derivs(self, rho):
        rho = np.maximum(np.asarray(rho, dtype=float), RHO_MIN)
        A = np.asarray(self.A, dtype=float)
        B = np.asarray(self.B, dtype=float)
        dead = (A <= 0) | (B <= 0)
        As = np.where(dead, 1.0, A)
        Bs = np.where(dead, 1.0, B)
        u = np.log(rho)
        q = 0.5 * (self.alpha + self.beta)
        nu = self.alpha - self.beta
        x = np.log(As) - np.log(Bs) + nu * u
        h = _sinhc(x)
        h1, h2 = _sinhc_derivs(x)
        base = self.c * np.sqrt(As * Bs) * np.exp(q * u)
        v = base * h
        du = base * (q * h + nu * h1)
        duu = base * (q * q * h + 2.0 * q * nu * h1 + nu * nu * h2)
        d1 = du / rho
        d2 = (duu - du) / (rho * rho)
        if np.any(dead):
            v, d1, d2 = (np.where(dead, 0.0, t) for t in (v, d1, d2))
        return v, d1, d2


@dataclass
class MobilitySpec:
    """Transport mobilities per axis and an optional reaction mobility."""

    v1x: Mobility
    v1y: Mobility | None = None
    v2: Mobility | None = None

    def __post_init__(self):
        if self.v1y is None:
            self.v1y = self.v1x

    @property
    def has_reaction(self) -> bool:
        return self.v2 is not None

    def convexity_certified(self) -> bool:
        """True when 2V2'^2 - (r+V2)V2'' >= 0 holds for every r > 0."""
        return self.v2 is None or getattr(self.v2, "concave", False)


# -- energies ------------------------------------------------------------

def diffusion_term(rho, m: float, alpha: float = 1.0):
    """``alpha*U_m(rho)`` and its derivative.

    U_1 = rho log rho, U_m = rho**m/(m-1).  At rho = 0 with m = 1 the
    derivative is -inf, which callers must avoid by flooring rho.
    """
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0):
        raise ValueError("density must be nonnegative")
    if m < 1:
        raise ValueError("diffusion exponent must be >= 1")
    with np.errstate(divide="ignore", invalid="ignore"):
        if m == 1:
            v = np.where(rho > 0, rho * np.log(np.where(rho > 0, rho, 1.0)), 0.0)
            d = np.log(rho) + 1.0
        else:
            v = rho ** m / (m - 1.0)
            d = m / (m - 1.0) * rho ** (m - 1.0)
    out = alpha * v, alpha * d
    if out[0].ndim == 0:
        return float(out[0]), float(out[1])
    return out


@dataclass
class EnergySpec:
    """alpha*U(rho) + rho*V(x) + 1/2 (W*rho) rho.

    U is U_m when ``kappa`` is None, otherwise the detailed-balance entropy
    rho*(log(kappa*rho) - 1).
    """

    alpha: float = 0.0
    m: float = 1.0
    potential: Callable | None = None
    kernel: Callable | None = None
    kernel_singular: bool = False
    kappa: float | None = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("diffusion coefficient must be >= 0")
        if self.m < 1:
            raise ValueError("diffusion exponent must be >= 1")
        if self.kappa is not None and self.kappa <= 0:
            raise ValueError("kappa must be positive")

    @property
    def has_log(self) -> bool:
        return self.alpha > 0 and (self.kappa is not None or self.m == 1)

    def density(self, rho):
        """Internal-energy density alpha*U(rho), vectorized, rho >= 0."""
        rho = np.asarray(rho, dtype=float)
        if self.alpha == 0:
            return np.zeros_like(rho)
        with np.errstate(divide="ignore", invalid="ignore"):
            safe = np.where(rho > 0, rho, 1.0)
            if self.kappa is not None:
                v = np.where(rho > 0, rho * (np.log(self.kappa * safe) - 1.0), 0.0)
            elif self.m == 1:
                v = np.where(rho > 0, rho * np.log(safe), 0.0)
            else:
                v = rho ** self.m / (self.m - 1.0)
        return self.alpha * v

    def derivs(self, rho):
        """First and second derivative of alpha*U at rho (may be inf at 0)."""
        rho = np.asarray(rho, dtype=float)
        if self.alpha == 0:
            z = np.zeros_like(rho)
            return z, z
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.kappa is not None or self.m == 1:
                kap = 1.0 if self.kappa is None else self.kappa
                d1 = np.log(kap * rho) + (0.0 if self.kappa is not None else 1.0)
                d2 = 1.0 / rho
            else:
                m = self.m
                d1 = m / (m - 1.0) * rho ** (m - 1.0)
                d2 = m * rho ** (m - 2.0)
        return self.alpha * d1, self.alpha * d2


def energy_eval(spec: EnergySpec, disc: Discretization, rho, conv=None, potential=None) -> float:
    """Discrete energy (alpha U(rho) + rho V, 1)_h + 1/2 (W*rho, rho)_h.

    ``conv`` is the convolution W*rho at the nodes; it is required when the
    energy has an interaction kernel.  ``potential`` may pass pre-sampled V.
    """
    e = spec.density(rho)
    if spec.potential is not None:
        pot = disc.sample(spec.potential) if potential is None else potential
        e = e + rho * pot
    total = disc.integrate(e)
    if spec.kernel is not None:
        if conv is None:
            raise ValueError("interaction energy needs the convolution W*rho")
        total += 0.5 * disc.inner(conv, rho)
    return float(total)


# -- reaction networks ---------------------------------------------------

@dataclass
class ReactionNetwork:
    """Reversible mass-action network  sum alpha_i X_i <=> sum beta_i X_i.

    ``alpha`` and ``beta`` have shape (R, M).  ``kappa`` holds the
    detailed-balance constants; when omitted they are taken as the
    least-norm solution of  sum_i (alpha-beta)_pi log kappa_i = log(k+/k-).
    """

    alpha: np.ndarray
    beta: np.ndarray
    k_plus: np.ndarray
    k_minus: np.ndarray
    gamma: np.ndarray
    kappa: np.ndarray | None = None
    diffusion_exponent: np.ndarray | None = None
    names: Sequence[str] | None = None

    def __post_init__(self):
        self.alpha = np.atleast_2d(np.asarray(self.alpha, dtype=int))
        self.beta = np.atleast_2d(np.asarray(self.beta, dtype=int))
        if self.alpha.shape != self.beta.shape:
            raise ValueError("stoichiometric matrices differ in shape")
        if np.any(self.alpha < 0) or np.any(self.beta < 0):
            raise ValueError("stoichiometric coefficients must be nonnegative")
        R, M = self.alpha.shape
        self.k_plus = np.broadcast_to(np.asarray(self.k_plus, dtype=float), (R,)).copy()
        self.k_minus = np.broadcast_to(np.asarray(self.k_minus, dtype=float), (R,)).copy()
        self.gamma = np.broadcast_to(np.asarray(self.gamma, dtype=float), (M,)).copy()
        if np.any(self.gamma < 0):
            raise ValueError("diffusion rates must be >= 0")
        if self.diffusion_exponent is None:
            self.diffusion_exponent = np.ones(M)
        self.diffusion_exponent = np.broadcast_to(
            np.asarray(self.diffusion_exponent, dtype=float), (M,)).copy()
        if self.kappa is None:
            self.kappa = self._least_norm_kappa()
        self.kappa = np.asarray(self.kappa, dtype=float)
        if np.any(self.kappa <= 0):
            raise ValueError("kappa values must be positive")
        if np.all(self.k_plus > 0) and np.all(self.k_minus > 0):
            lhs = self.nu @ np.log(self.kappa)
            if not np.allclose(lhs, np.log(self.k_plus / self.k_minus), rtol=1e-10, atol=1e-10):
                raise ValueError("kappa values are inconsistent with the reaction rates")

    @property
    def n_species(self) -> int:
        return self.alpha.shape[1]

    @property
    def n_reactions(self) -> int:
        return self.alpha.shape[0]

    @property
    def nu(self) -> np.ndarray:
        """Net stoichiometry alpha - beta, shape (R, M)."""
        return self.alpha - self.beta

    def _least_norm_kappa(self):
        if np.any(self.k_plus <= 0) or np.any(self.k_minus <= 0):
            return np.ones(self.n_species)
        rhs = np.log(self.k_plus / self.k_minus)
        sol, *_ = np.linalg.lstsq(self.nu.astype(float), rhs, rcond=None)
        return np.exp(sol)

    def diffusing(self, i: int) -> bool:
        return self.gamma[i] > 0

    def transport_mobility(self, i: int) -> PowerMobility:
        return PowerMobility(self.gamma[i], self.diffusion_exponent[i])

    def energy(self, i: int) -> EnergySpec:
        return EnergySpec(alpha=1.0, kappa=float(self.kappa[i]))

    def stoich_apply(self, phi) -> np.ndarray:
        """sum_i (alpha_i^p - beta_i^p) phi_i for every reaction p.

        ``phi`` has shape (M,) or (M, N); the result has shape (R,) or (R, N).
        """
        return self.nu @ np.asarray(phi, dtype=float)

    def monomials(self, rho, p: int, skip: int | None = None):
        """(rho^alpha^p, rho^beta^p) with 0**0 = 1; species ``skip`` left out."""
        rho = np.asarray(rho, dtype=float)
        a = np.ones(rho.shape[1:])
        b = np.ones(rho.shape[1:])
        for j in range(self.n_species):
            if j == skip:
                continue
            if self.alpha[p, j]:
                a = a * rho[j] ** self.alpha[p, j]
            if self.beta[p, j]:
                b = b * rho[j] ** self.beta[p, j]
        return a, b

    def reaction_mobility(self, p: int, rho):
        """V_{2,p}(rho) = l(k+ rho^alpha, k- rho^beta); ``rho`` has shape (M,) or (M, N)."""
        rho = np.asarray(rho, dtype=float)
        if np.any(rho < 0):
            raise ValueError("densities must be nonnegative")
        a, b = self.monomials(rho, p)
        return log_mean(self.k_plus[p] * a, self.k_minus[p] * b)

    def species_reaction_mobility(self, p: int, i: int, rho) -> LogMeanMobility:
        """V_{2,p} as a function of rho_i alone, the other species frozen at ``rho``."""
        a, b = self.monomials(np.maximum(rho, RHO_MIN), p, skip=i)
        return LogMeanMobility(1.0, self.k_plus[p] * a, self.k_minus[p] * b,
                               float(self.alpha[p, i]), float(self.beta[p, i]))

    def reactions_of(self, i: int) -> list[int]:
        return [p for p in range(self.n_reactions) if self.alpha[p, i] or self.beta[p, i]]

    def equilibrium_residual(self, rho) -> np.ndarray:
        rho = np.asarray(rho, dtype=float)
        out = []
        for p in range(self.n_reactions):
            a, b = self.monomials(rho, p)
            out.append(self.k_plus[p] * a - self.k_minus[p] * b)
        return np.array(out)


# -- convolution ---------------------------------------------------------

class Convolver:
    """Evaluates (W*rho)(xi_i) = sum_j W(xi_i - eta_j) rho(eta_j) w_j at all nodes.

    Targets are the Gauss nodes of ``disc``.  Sources are the same nodes for
    smooth kernels; for kernels singular at the origin, a (k+2)-point Gauss
    rule per cell is used instead (rho is interpolated exactly onto it), so
    the kernel is never evaluated at zero.

    ``mode='fft'`` splits the sum into per-coset Toeplitz blocks evaluated with
    zero-padded FFTs; ``mode='direct'`` forms the dense kernel matrix.
    """

    def __init__(self, disc: Discretization, kernel: Callable, singular: bool = False, mode: str = "fft"):
        if mode not in ("fft", "direct"):
            raise ValueError(f"unknown convolution mode {mode!r}")
        if disc.ky != disc.k:
            raise ValueError("convolution needs the same degree in both directions")
        self.disc = disc
        self.kernel = kernel
        self.singular = singular
        self.mode = mode
        m = disc.mesh
        k1 = disc.k + 1
        self.ns = k1 + 1 if singular else k1
        ts, ws = gauss_legendre_1d(self.ns)
        self.tt = disc.ax.ref_nodes
        self.ts, self.ws = ts, ws
        lx, _ = lagrange_matrices(disc.ax.ref_nodes, ts)
        self._interp = lx  # (ns, k1), same in both directions
        if mode == "direct":
            sx = (m.xmin + (np.arange(m.nx)[:, None] + ts[None, :]) * m.hx).ravel()
            sy = (m.ymin + (np.arange(m.ny)[:, None] + ts[None, :]) * m.hy).ravel()
            SX, SY = np.meshgrid(sx, sy)
            dx = disc.x0[:, None] - SX.ravel()[None, :]
            dy = disc.x1[:, None] - SY.ravel()[None, :]
            self._K = np.asarray(kernel(dx, dy), dtype=float)
        else:
            self._setup_fft()

    def source_values(self, rho):
        """rho times weights on the source rule, shape (ny, ns, nx, ns)."""
        m = self.disc.mesh
        k1 = self.disc.k + 1
        cells = rho.reshape(m.ny, k1, m.nx, k1)
        if self.singular:
            cells = np.einsum("qb,pa,jbia->jqip", self._interp, self._interp, cells)
        w = np.outer(self.ws * m.hy, self.ws * m.hx)  # (ns_y, ns_x)
        return cells * w[None, :, None, :]

    def _setup_fft(self):
        m = self.disc.mesh
        nx, ny = m.nx, m.ny
        self.px, self.py = 2 * nx, 2 * ny
        di = np.arange(self.px)
        di = np.where(di < nx, di, di - self.px)  # circular offsets i - i'
        dj = np.arange(self.py)
        dj = np.where(dj < ny, dj, dj - self.py)
        offx = (di[None, None, :] + self.tt[:, None, None] - self.ts[None, :, None]) * m.hx  # (nt, ns, px)
        offy = (dj[None, None, :] + self.tt[:, None, None] - self.ts[None, :, None]) * m.hy
        X = offx[None, None, :, :, None, :]
        Y = offy[:, :, None, None, :, None]
        K = np.asarray(self.kernel(X, Y), dtype=float)  # (nt_y, ns_y, nt_x, ns_x, py, px)
        K = np.broadcast_to(K, offy.shape[:2] + offx.shape[:2] + (self.py, self.px))
        # offsets of magnitude n never occur; zero them so padding stays clean
        K = K.copy()
        K[..., ny, :] = 0.0
        K[..., :, nx] = 0.0
        self._Khat = np.fft.rfft2(K)

    def __call__(self, rho) -> np.ndarray:
        rho = np.asarray(rho, dtype=float)
        src = self.source_values(rho)
        if self.mode == "direct":
            return self._K @ src.ravel()
        m = self.disc.mesh
        # src[j, d, i, b] -> (d, b, py, px) zero padded
        S = np.zeros((self.ns, self.ns, self.py, self.px))
        S[:, :, :m.ny, :m.nx] = src.transpose(1, 3, 0, 2)
        Shat = np.fft.rfft2(S)
        Ohat = np.einsum("cdab...,db...->ca...", self._Khat, Shat)
        out = np.fft.irfft2(Ohat, s=(self.py, self.px))[:, :, :m.ny, :m.nx]  # (c, a, j, i)
        return out.transpose(2, 0, 3, 1).reshape(-1)


def convolve(disc: Discretization, kernel: Callable, rho, singular: bool = False, mode: str = "fft"):
    """One-off convolution; build a :class:`Convolver` to reuse the kernel setup."""
    return Convolver(disc, kernel, singular, mode)(rho)
