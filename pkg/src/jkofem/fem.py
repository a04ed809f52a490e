"""Uniform rectangular meshes, tensor-product Q^k spaces and Gauss-Legendre
nodal quadrature.

Two kinds of discrete fields live on a :class:`Discretization`:

* a *quad field* is a 1D array of length ``N_W`` holding the values of a
  discontinuous Q^k function at the global Gauss-Legendre nodes.  Nodes are
  stored in global tensor order: reshaped to ``(ny*(k+1), nx*(k+1))`` the
  array is an image with ``x0`` running along the last axis.
* a *continuous field* is the DOF vector of the H1-conforming Q^k space with
  Gauss-Lobatto-Legendre nodal basis, also in global tensor order
  (``(k*ny+1, k*nx+1)`` for Neumann, ``(k*ny, k*nx)`` for periodic).

Because the mesh is uniform, every 2D operator factors into 1D pieces, and
the code works with those 1D factors wherever it can.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp

NEUMANN = "neumann"
PERIODIC = "periodic"


def gauss_legendre_1d(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre rule with ``n`` points on [0, 1].

    Nodes come from Newton iteration on the three-term Legendre recurrence,
    started from the Chebyshev-like asymptotic guess.
    """
    if n < 1:
        raise ValueError(f"need at least one quadrature point, got n={n}")
    nodes = np.empty(n)
    weights = np.empty(n)
    for i in range((n + 1) // 2):
        x = np.cos(np.pi * (i + 0.75) / (n + 0.5))
        for _ in range(100):
            p0, p1 = 1.0, x
            for j in range(2, n + 1):
                p0, p1 = p1, ((2 * j - 1) * x * p1 - (j - 1) * p0) / j
            dp = n * (x * p1 - p0) / (x * x - 1.0)
            dx = p1 / dp
            x -= dx
            if abs(dx) < 1e-16:
                break
        p0, p1 = 1.0, x
        for j in range(2, n + 1):
            p0, p1 = p1, ((2 * j - 1) * x * p1 - (j - 1) * p0) / j
        dp = n * (x * p1 - p0) / (x * x - 1.0)
        w = 2.0 / ((1.0 - x * x) * dp * dp)
        nodes[i], nodes[n - 1 - i] = -x, x
        weights[i] = weights[n - 1 - i] = w
    if n % 2 == 1:
        nodes[n // 2] = 0.0
    return 0.5 * (nodes + 1.0), 0.5 * weights


def gauss_lobatto_1d(n: int) -> np.ndarray:
    """Gauss-Lobatto-Legendre nodes (n >= 2 points) on [0, 1]."""
    if n < 2:
        raise ValueError("Gauss-Lobatto rule needs n >= 2")
    interior = np.polynomial.legendre.Legendre.basis(n - 1).deriv().roots()
    x = np.concatenate(([-1.0], np.sort(interior.real), [1.0]))
    return 0.5 * (x + 1.0)


def lagrange_matrices(nodes: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values and first derivatives of the Lagrange basis on ``nodes`` at ``t``.

    Returns arrays of shape ``(len(t), len(nodes))``.
    """
    nodes = np.asarray(nodes, dtype=float)
    t = np.asarray(t, dtype=float)
    n = len(nodes)
    val = np.ones((len(t), n))
    der = np.zeros((len(t), n))
    for a in range(n):
        others = [b for b in range(n) if b != a]
        denom = np.prod(nodes[a] - nodes[others])
        for b in others:
            val[:, a] *= t - nodes[b]
        for c in others:
            term = np.ones(len(t))
            for b in others:
                if b != c:
                    term *= t - nodes[b]
            der[:, a] += term
        val[:, a] /= denom
        der[:, a] /= denom
    return val, der


@dataclass(frozen=True)
class UniformMesh:
    xmin: float
    xmax: float
    ymin: float
    ymax: float
    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"mesh needs at least one cell per direction, got {self.nx}x{self.ny}")
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ValueError("empty domain")

    @property
    def hx(self) -> float:
        return (self.xmax - self.xmin) / self.nx

    @property
    def hy(self) -> float:
        return (self.ymax - self.ymin) / self.ny

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    def refined(self, factor: int = 2) -> "UniformMesh":
        return UniformMesh(self.xmin, self.xmax, self.ymin, self.ymax,
                           self.nx * factor, self.ny * factor)

    @classmethod
    def square(cls, half_width: float, n: int) -> "UniformMesh":
        return cls(-half_width, half_width, -half_width, half_width, n, n)


@dataclass
class Axis1D:
    """One direction of the tensor-product discretization.

    ``E`` and ``D`` map continuous DOFs to values / derivatives at the
    quadrature nodes of this axis.
    """

    lo: float
    hi: float
    n: int
    k: int
    bc: str
    npts: int  # quadrature points per cell

    def __post_init__(self):
        self.h = (self.hi - self.lo) / self.n
        t, w = gauss_legendre_1d(self.npts)
        self.ref_nodes, self.ref_weights = t, w
        cells = np.arange(self.n)
        self.nodes = (self.lo + (cells[:, None] + t[None, :]) * self.h).ravel()
        self.weights = np.tile(w * self.h, self.n)
        if self.k == 0:
            # constants on a single cell: the degenerate direction of a 1D run
            if self.n != 1 or self.bc == PERIODIC:
                raise ValueError("degree 0 is only allowed on a single non-periodic cell")
            self.gll = np.array([0.5])
            val, der = np.ones((self.npts, 1)), np.zeros((self.npts, 1))
            self.ndof = 1
        else:
            self.gll = gauss_lobatto_1d(self.k + 1)
            val, der = lagrange_matrices(self.gll, t)
            self.ndof = self.k * self.n + (0 if self.bc == PERIODIC else 1)
        rows, cols, ev, dv = [], [], [], []
        for c in range(self.n):
            for q in range(self.npts):
                for a in range(self.k + 1):
                    rows.append(c * self.npts + q)
                    cols.append((c * self.k + a) % self.ndof)
                    ev.append(val[q, a])
                    dv.append(der[q, a] / self.h)
        shape = (self.n * self.npts, self.ndof)
        self.E = sp.csr_matrix((ev, (rows, cols)), shape=shape)
        self.D = sp.csr_matrix((dv, (rows, cols)), shape=shape)
        self.E.sum_duplicates()
        self.D.sum_duplicates()

    @cached_property
    def dof_coords(self) -> np.ndarray:
        c = np.arange(self.n)
        if self.k == 0:
            return np.array([0.5 * (self.lo + self.hi)])
        pts = (self.lo + (c[:, None] + self.gll[None, :-1]) * self.h).ravel()
        if self.bc != PERIODIC:
            pts = np.append(pts, self.hi)
        return pts

    @cached_property
    def mass(self) -> sp.csr_matrix:
        return (self.E.T @ sp.diags(self.weights) @ self.E).tocsr()

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        return (self.D.T @ sp.diags(self.weights) @ self.D).tocsr()


class Discretization:
    """Equal-order pair (V_h^k, W_h^k) on a uniform rectangular mesh.

    ``degree_y=0`` turns the y direction into a single cell carrying constants
    (one node, one DOF); this is the one-dimensional mode used for problems
    that do not depend on x1.  It requires ``mesh.ny == 1``.
    """

    def __init__(self, mesh: UniformMesh, k: int, bc: str = NEUMANN, degree_y: int | None = None):
        if k < 1:
            raise ValueError(f"polynomial degree must be >= 1, got {k}")
        if bc not in (NEUMANN, PERIODIC):
            raise ValueError(f"unknown boundary condition {bc!r}")
        ky = k if degree_y is None else degree_y
        if ky not in (0, k):
            raise ValueError("degree_y must be 0 (one-dimensional mode) or equal to k")
        if ky == 0 and mesh.ny != 1:
            raise ValueError("one-dimensional mode needs a single cell in y")
        self.mesh = mesh
        self.k = k
        self.ky = ky
        self.bc = bc
        self.ax = Axis1D(mesh.xmin, mesh.xmax, mesh.nx, k, bc, k + 1)
        self.ay = Axis1D(mesh.ymin, mesh.ymax, mesh.ny, ky, NEUMANN if ky == 0 else bc, ky + 1)
        self.qshape = (len(self.ay.nodes), len(self.ax.nodes))
        self.dshape = (self.ay.ndof, self.ax.ndof)
        self.n_quad = self.qshape[0] * self.qshape[1]
        self.n_dof = self.dshape[0] * self.dshape[1]
        self.weights = np.outer(self.ay.weights, self.ax.weights).ravel()
        X, Y = np.meshgrid(self.ax.nodes, self.ay.nodes)
        self.x0 = X.ravel()
        self.x1 = Y.ravel()

    @property
    def nodes(self) -> np.ndarray:
        return np.stack([self.x0, self.x1], axis=1)

    def sample(self, f: Callable) -> np.ndarray:
        """Quad field with values ``f(x0, x1)`` at the nodes."""
        return np.broadcast_to(np.asarray(f(self.x0, self.x1), dtype=float), (self.n_quad,)).copy()

    def interpolate_continuous(self, f: Callable) -> np.ndarray:
        """Continuous field interpolating ``f`` at the GLL DOF points."""
        X, Y = np.meshgrid(self.ax.dof_coords, self.ay.dof_coords)
        return np.broadcast_to(np.asarray(f(X, Y), dtype=float), self.dshape).ravel().copy()

    # -- discrete inner products ---------------------------------------
    def inner(self, u: np.ndarray, v: np.ndarray) -> float:
        return discrete_inner(u, v, self.weights)

    def integrate(self, u: np.ndarray) -> float:
        return float(np.dot(u, self.weights))

    # -- differential operator ----------------------------------------
    @cached_property
    def diff_operator(self) -> "DiffOperator":
        return DiffOperator(self)

    @cached_property
    def mass_matrix(self) -> sp.csr_matrix:
        return sp.kron(self.ay.mass, self.ax.mass, format="csr")

    @cached_property
    def stiffness_matrix(self) -> sp.csr_matrix:
        return (sp.kron(self.ay.mass, self.ax.stiffness)
                + sp.kron(self.ay.stiffness, self.ax.mass)).tocsr()

    # -- evaluation of W_h^k functions away from the nodes -------------
    def evaluate(self, u: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
        """Evaluate the piecewise Q^k function with node values ``u`` at points.

        Points on a shared cell face are taken from the cell to the left/below,
        except on the upper domain boundary.
        """
        px = np.asarray(px, dtype=float)
        py = np.asarray(py, dtype=float)
        kx, ky = self.ax.npts, self.ay.npts
        m = self.mesh
        ix = np.clip(np.floor((px - m.xmin) / m.hx).astype(int), 0, m.nx - 1)
        iy = np.clip(np.floor((py - m.ymin) / m.hy).astype(int), 0, m.ny - 1)
        tx = (px - m.xmin) / m.hx - ix
        ty = (py - m.ymin) / m.hy - iy
        # face points belong to the left cell when not on the lower boundary
        on_face = (np.isclose(tx, 0.0, atol=1e-12)) & (ix > 0)
        ix = np.where(on_face, ix - 1, ix)
        tx = np.where(on_face, 1.0, tx)
        on_face = (np.isclose(ty, 0.0, atol=1e-12)) & (iy > 0)
        iy = np.where(on_face, iy - 1, iy)
        ty = np.where(on_face, 1.0, ty)
        lx, _ = lagrange_matrices(self.ax.ref_nodes, tx.ravel())
        ly, _ = lagrange_matrices(self.ay.ref_nodes, ty.ravel())
        img = u.reshape(self.qshape)
        rows = iy.ravel()[:, None] * ky + np.arange(ky)[None, :]
        cols = ix.ravel()[:, None] * kx + np.arange(kx)[None, :]
        block = img[rows[:, :, None], cols[:, None, :]]
        out = np.einsum("pb,pa,pba->p", ly, lx, block)
        return out.reshape(px.shape)

    def resample(self, u: np.ndarray, npts: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Values of ``u`` on an ``npts``-point Gauss rule per cell direction.

        Returns ``(values, x0, x1, weights)``, all flat in tensor order.
        """
        t, w = gauss_legendre_1d(npts)
        lx, _ = lagrange_matrices(self.ax.ref_nodes, t)
        ly, _ = lagrange_matrices(self.ay.ref_nodes, t)
        m = self.mesh
        cells = u.reshape(m.ny, self.ay.npts, m.nx, self.ax.npts)
        vals = np.einsum("qb,pa,jbia->jqip", ly, lx, cells)
        xs = (m.xmin + (np.arange(m.nx)[:, None] + t[None, :]) * m.hx).ravel()
        ys = (m.ymin + (np.arange(m.ny)[:, None] + t[None, :]) * m.hy).ravel()
        X, Y = np.meshgrid(xs, ys)
        W = np.outer(np.tile(w * m.hy, m.ny), np.tile(w * m.hx, m.nx))
        return vals.reshape(-1), X.ravel(), Y.ravel(), W.ravel()


def discrete_inner(u: np.ndarray, v: np.ndarray, weights: np.ndarray) -> float:
    """Nodal quadrature inner product sum_i u_i v_i w_i."""
    u = np.asarray(u)
    v = np.asarray(v)
    if u.shape != v.shape or u.shape != weights.shape:
        raise ValueError(f"field sizes do not match the rule: {u.shape}, {v.shape}, {weights.shape}")
    return float(np.sum(u * v * weights))


def l2_error(disc: Discretization, u: np.ndarray, f: Callable, overintegrate: int | None = None) -> float:
    """Discrete L2 distance between the quad field ``u`` and the function ``f``.

    With ``overintegrate=None`` the nodal rule is used, so only the node values
    matter.  Passing a point count evaluates the Q^k polynomial and ``f`` on a
    finer per-cell Gauss rule instead, which measures the interpolation error
    between the nodes as well.
    """
    if overintegrate is None:
        d = u - disc.sample(f)
        return float(np.sqrt(disc.inner(d, d)))
    vals, x0, x1, w = disc.resample(u, overintegrate)
    d = vals - np.asarray(f(x0, x1), dtype=float)
    return float(np.sqrt(np.sum(d * d * w)))


@dataclass
class DiffOperator:
    """Maps continuous DOFs to node values of (Phi, d/dx0 Phi, d/dx1 Phi).

    The three operators are Kronecker products of 1D factors; ``apply`` and
    ``apply_transpose`` use the factored form, while ``E0``/``Dx``/``Dy`` give
    the assembled sparse matrices.
    """

    disc: Discretization
    _cache: dict = field(default_factory=dict, repr=False)

    def _kron(self, ay, ax):
        return sp.kron(ay, ax, format="csr")

    @property
    def E0(self) -> sp.csr_matrix:
        if "E0" not in self._cache:
            self._cache["E0"] = self._kron(self.disc.ay.E, self.disc.ax.E)
        return self._cache["E0"]

    @property
    def Dx(self) -> sp.csr_matrix:
        if "Dx" not in self._cache:
            self._cache["Dx"] = self._kron(self.disc.ay.E, self.disc.ax.D)
        return self._cache["Dx"]

    @property
    def Dy(self) -> sp.csr_matrix:
        if "Dy" not in self._cache:
            self._cache["Dy"] = self._kron(self.disc.ay.D, self.disc.ax.E)
        return self._cache["Dy"]

    @property
    def _factors(self):
        """1D factors (and transposes), dense when small so products hit BLAS."""
        if "f" not in self._cache:
            ay, ax = self.disc.ay, self.disc.ax
            small = max(ax.E.shape[0] * ax.E.shape[1], ay.E.shape[0] * ay.E.shape[1]) <= 400_000

            def conv(M):
                return M.toarray() if small else M.tocsr()
            self._cache["f"] = {
                "Ey": conv(ay.E), "Dy": conv(ay.D), "EyT": conv(ay.E.T), "DyT": conv(ay.D.T),
                "Ex": conv(ax.E), "Dx": conv(ax.D), "ExT": conv(ax.E.T), "DxT": conv(ax.D.T),
                "dense": small}
        return self._cache["f"]

    @staticmethod
    def _right(X, M, MT, dense):
        # X @ M^T for dense M, or the equivalent product with a sparse factor
        return X @ MT if dense else (M @ X.T).T

    def value(self, phi: np.ndarray) -> np.ndarray:
        return self.apply(phi, grad=False)

    def apply(self, phi: np.ndarray, grad: bool = True):
        """Return ``(E0 phi, Dx phi, Dy phi)`` at the nodes (value only if not grad)."""
        f = self._factors
        P = phi.reshape(self.disc.dshape)
        PxE = self._right(P, f["Ex"], f["ExT"], f["dense"])  # (ndof_y, nq_x)
        val = (f["Ey"] @ PxE).ravel()
        if not grad:
            return val
        PxD = self._right(P, f["Dx"], f["DxT"], f["dense"])
        dx = (f["Ey"] @ PxD).ravel()
        dy = (f["Dy"] @ PxE).ravel()
        return val, dx, dy

    def apply_transpose(self, f0: np.ndarray | None, fx: np.ndarray | None = None,
                        fy: np.ndarray | None = None) -> np.ndarray:
        """``E0^T f0 + Dx^T fx + Dy^T fy`` (any argument may be None)."""
        f = self._factors
        qs = self.disc.qshape
        d = f["dense"]
        out = np.zeros(self.disc.dshape)
        inner = None
        if f0 is not None:
            inner = self._right(f0.reshape(qs), f["ExT"], f["Ex"], d)
        if fx is not None:
            t = self._right(fx.reshape(qs), f["DxT"], f["Dx"], d)
            inner = t if inner is None else inner + t
        if inner is not None:
            out += f["EyT"] @ inner
        if fy is not None:
            out += f["DyT"] @ self._right(fy.reshape(qs), f["ExT"], f["Ex"], d)
        return out.ravel()

    def weighted_rhs(self, f0, fx=None, fy=None) -> np.ndarray:
        """Load vector (f0, Psi)_h + (fx, dPsi/dx0)_h + (fy, dPsi/dx1)_h."""
        w = self.disc.weights
        return self.apply_transpose(None if f0 is None else f0 * w,
                                    None if fx is None else fx * w,
                                    None if fy is None else fy * w)


def build_diff_operator(mesh: UniformMesh, k: int, bc: str = NEUMANN) -> DiffOperator:
    return Discretization(mesh, k, bc).diff_operator
