"""SPD solves for the constant-coefficient Step-A systems.

The Step-A matrix is ``c*M + s*K`` (mass plus stiffness on the continuous
space) and never changes during a run.  Four interchangeable solvers share a
``solve(b, x0)`` interface:

``fdm``
    fast diagonalization; exact, uses the Kronecker structure of M and K on
    the uniform mesh.  Default.
``direct``
    sparse LU factorization computed once.
``pcg``
    Jacobi-preconditioned conjugate gradients.
``gmg``
    conjugate gradients preconditioned by one geometric multigrid V-cycle.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import Discretization, lagrange_matrices, UniformMesh

log = logging.getLogger(__name__)

SOLVERS = ("fdm", "direct", "pcg", "gmg")


@dataclass
class SolveReport:
    iterations: int = 0
    residual: float = 0.0
    converged: bool = True


def check_spd(A) -> sp.csr_matrix:
    """Return ``A`` as CSR after checking exact structural symmetry and a positive diagonal."""
    A = sp.csr_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"matrix is not square: {A.shape}")
    if (abs(A - A.T) > 1e-12 * abs(A).max()).nnz:
        raise ValueError("matrix is not symmetric")
    if np.any(A.diagonal() <= 0):
        raise ValueError("matrix diagonal is not strictly positive")
    return A


def pcg_solve(A, b, x0=None, tol=1e-10, maxit=2000, precond=None, history=None):
    """Preconditioned conjugate gradients.

    ``precond`` is a callable ``r -> z``; Jacobi scaling is used when omitted.
    If ``history`` is a list, the iterate after every step is appended to it.
    Non-convergence is reported through the returned :class:`SolveReport`.
    """
    A = sp.csr_matrix(A) if not isinstance(A, spla.LinearOperator) else A
    b = np.asarray(b, dtype=float)
    n = A.shape[0]
    if b.shape != (n,):
        raise ValueError(f"right-hand side has shape {b.shape}, expected ({n},)")
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    if x.shape != (n,):
        raise ValueError(f"initial guess has shape {x.shape}, expected ({n},)")
    if precond is None:
        dinv = 1.0 / A.diagonal()
        precond = lambda r: dinv * r  # noqa: E731
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), SolveReport(0, 0.0, True)
    r = b - A @ x
    res = np.linalg.norm(r) / bnorm
    if history is not None:
        history.append(x.copy())
    if res <= tol:
        return x, SolveReport(0, res, True)
    z = precond(r)
    p = z.copy()
    rz = r @ z
    for it in range(1, maxit + 1):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if history is not None:
            history.append(x.copy())
        res = np.linalg.norm(r) / bnorm
        if res <= tol:
            return x, SolveReport(it, res, True)
        z = precond(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    log.warning("pcg did not converge: residual %.3e after %d iterations", res, maxit)
    return x, SolveReport(maxit, res, False)


# -- geometric multigrid ------------------------------------------------

def _prolong_1d(coarse, fine) -> sp.csr_matrix:
    """Interpolation of the coarse continuous 1D space at the fine DOF points."""
    x = fine.dof_coords
    cell = np.clip(np.floor((x - coarse.lo) / coarse.h).astype(int), 0, coarse.n - 1)
    t = (x - coarse.lo) / coarse.h - cell
    val, _ = lagrange_matrices(coarse.gll, t)
    rows = np.repeat(np.arange(len(x)), coarse.k + 1)
    cols = ((cell[:, None] * coarse.k + np.arange(coarse.k + 1)[None, :]) % coarse.ndof).ravel()
    P = sp.coo_matrix((val.ravel(), (rows, cols)), shape=(fine.ndof, coarse.ndof)).tocsr()
    P.data[np.abs(P.data) < 1e-14] = 0.0
    P.eliminate_zeros()
    return P


class GMGHierarchy:
    """Nested uniform meshes (coarse to fine) for the operator ``c*M + s*K``.

    Each finer mesh must halve the coarser one in both directions.
    """

    def __init__(self, discs: list[Discretization], mass_coef: float = 2.0,
                 stiff_coef: float = 1.0, smooth_steps: int = 3, omega: float = 0.6):
        if not discs:
            raise ValueError("empty hierarchy")
        for c, f in zip(discs[:-1], discs[1:]):
            cm, fm = c.mesh, f.mesh
            same_box = (cm.xmin, cm.xmax, cm.ymin, cm.ymax) == (fm.xmin, fm.xmax, fm.ymin, fm.ymax)
            if not (same_box and fm.nx == 2 * cm.nx and fm.ny == 2 * cm.ny
                    and c.k == f.k and c.bc == f.bc):
                raise ValueError("hierarchy levels are not nested by uniform refinement")
        self.discs = discs
        fine = discs[-1]
        self.A = [None] * len(discs)
        self.A[-1] = (mass_coef * fine.mass_matrix + stiff_coef * fine.stiffness_matrix).tocsr()
        self.P = [None] * len(discs)
        for lvl in range(len(discs) - 1, 0, -1):
            f, c = discs[lvl], discs[lvl - 1]
            P = sp.kron(_prolong_1d(c.ay, f.ay), _prolong_1d(c.ax, f.ax), format="csr")
            self.P[lvl] = P
            self.A[lvl - 1] = (P.T @ self.A[lvl] @ P).tocsr()
        self.dinv = [1.0 / A.diagonal() for A in self.A]
        self.coarse_factor = sla.cho_factor(self.A[0].toarray())
        self.smooth_steps = smooth_steps
        self.omega = omega

    @classmethod
    def from_discretization(cls, disc: Discretization, levels: int, **kw) -> "GMGHierarchy":
        m = disc.mesh
        f = 2 ** (levels - 1)
        if levels < 1 or m.nx % f or m.ny % f:
            raise ValueError(f"{m.nx}x{m.ny} mesh cannot be coarsened {levels - 1} times")
        discs = [Discretization(UniformMesh(m.xmin, m.xmax, m.ymin, m.ymax, m.nx // 2 ** l, m.ny // 2 ** l),
                                disc.k, disc.bc) for l in range(levels - 1, -1, -1)]
        return cls(discs, **kw)

    @property
    def matrix(self) -> sp.csr_matrix:
        return self.A[-1]

    def _cycle(self, lvl, b, x):
        A = self.A[lvl]
        if lvl == 0:
            return sla.cho_solve(self.coarse_factor, b)
        w, dinv = self.omega, self.dinv[lvl]
        for _ in range(self.smooth_steps):
            x = x + w * dinv * (b - A @ x)
        r = b - A @ x
        P = self.P[lvl]
        x = x + P @ self._cycle(lvl - 1, P.T @ r, np.zeros(P.shape[1]))
        for _ in range(self.smooth_steps):
            x = x + w * dinv * (b - A @ x)
        return x


def gmg_vcycle(hierarchy: GMGHierarchy, b, x0=None):
    """One V-cycle with damped Jacobi smoothing on the finest level."""
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b) if x0 is None else np.asarray(x0, dtype=float).copy()
    return hierarchy._cycle(len(hierarchy.A) - 1, b, x)


# -- Step-A solver front end --------------------------------------------

class FastDiagonalization:
    """Exact inverse of ``c*My(x)Mx + s*(My(x)Kx + Ky(x)Mx)`` via 1D generalized eigenproblems."""

    def __init__(self, disc: Discretization, mass_coef: float, stiff_coef: float):
        lx, self.Vx = sla.eigh(disc.ax.stiffness.toarray(), disc.ax.mass.toarray())
        ly, self.Vy = sla.eigh(disc.ay.stiffness.toarray(), disc.ay.mass.toarray())
        self.denom = mass_coef + stiff_coef * (ly[:, None] + lx[None, :])
        self.shape = disc.dshape

    def __call__(self, b):
        B = b.reshape(self.shape)
        Z = (self.Vy.T @ B @ self.Vx) / self.denom
        return (self.Vy @ Z @ self.Vx.T).ravel()


class StepASolver:
    """Solver for the fixed SPD system ``c*M + s*K`` on one discretization."""

    def __init__(self, disc: Discretization, mass_coef: float, stiff_coef: float = 1.0,
                 method: str = "fdm", tol: float = 1e-10, maxit: int = 2000, gmg_levels: int | None = None):
        if method not in SOLVERS:
            raise ValueError(f"unknown linear solver {method!r}; choose from {SOLVERS}")
        if mass_coef <= 0 or stiff_coef < 0:
            raise ValueError("Step-A matrix must be SPD (mass coefficient > 0, stiffness >= 0)")
        self.disc = disc
        self.method = method
        self.tol = tol
        self.maxit = maxit
        self.mass_coef = mass_coef
        self.stiff_coef = stiff_coef
        self.report = SolveReport()
        self._A = None
        if method == "fdm":
            self._fdm = FastDiagonalization(disc, mass_coef, stiff_coef)
        elif method == "direct":
            self._lu = spla.splu(self.matrix.tocsc())
        elif method == "gmg":
            m = disc.mesh
            if gmg_levels is None:
                gmg_levels = 1
                while m.nx % 2 ** gmg_levels == 0 and m.ny % 2 ** gmg_levels == 0 and gmg_levels < 6:
                    gmg_levels += 1
            self._gmg = GMGHierarchy.from_discretization(disc, gmg_levels, mass_coef=mass_coef,
                                                         stiff_coef=stiff_coef)
            self._A = self._gmg.matrix

    @property
    def matrix(self) -> sp.csr_matrix:
        if self._A is None:
            d = self.disc
            A = self.mass_coef * d.mass_matrix
            if self.stiff_coef:
                A = A + self.stiff_coef * d.stiffness_matrix
            self._A = check_spd(A)
        return self._A

    def solve(self, b, x0=None):
        if self.method == "fdm":
            return self._fdm(b)
        if self.method == "direct":
            return self._lu.solve(b)
        precond = None
        if self.method == "gmg":
            precond = lambda r: gmg_vcycle(self._gmg, r)  # noqa: E731
        x, self.report = pcg_solve(self.matrix, b, x0, self.tol, self.maxit, precond=precond)
        return x
