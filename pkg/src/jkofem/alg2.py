"""Scalar ALG2 iteration for one relaxed JKO step.

One ALG iteration is

* Step A: solve the constant-coefficient SPD problem for the multiplier Phi;
* Step B: at every quadrature node, minimize the reduced one-variable
  problem for the density, then recover flux and source in closed form;
* Step C: the dual update u* = ubar - u/r.

The primal fields (rho, m0, m1, s) double as the Lagrange multiplier of the
saddle problem, so Step C needs no separate multiplier update.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field, fields, replace
from typing import Callable

import numpy as np

from .fem import Discretization
from .linsolve import StepASolver
from .physics import (Convolver, EnergySpec, LogMeanMobility, Mobility, MobilitySpec, PowerMobility,
                      energy_eval)

try:
    from . import _kernels
except ImportError:  # pragma: no cover - numba missing
    _kernels = None

log = logging.getLogger(__name__)

# "numba" (compiled per-node loop, default when available) or "numpy"
SCAN_DECADES = 10.0
NODE_BACKEND = os.environ.get("JKOFEM_NODE_BACKEND", "numba" if _kernels is not None else "numpy")


class PointwiseSolveError(RuntimeError):
    pass


@dataclass
class Alg2Params:
    r: float = 1.0
    iterations: int = 200
    newton_tol: float = 1e-12
    newton_maxit: int = 200
    pointwise_scan: int = 32
    scan_every: int = 10
    rho_min: float = 1e-12
    early_exit: bool = False
    early_tol: float = 1e-8
    linear_solver: str = "fdm"
    linear_tol: float = 1e-10
    linear_maxit: int = 2000

    def __post_init__(self):
        if self.r <= 0:
            raise ValueError("augmentation parameter r must be positive")
        if self.iterations < 1:
            raise ValueError("need at least one ALG iteration")
        if self.pointwise_scan == 1 or self.pointwise_scan < 0:
            raise ValueError("pointwise_scan must be 0 (off) or at least 2 points")
        if self.scan_every < 1:
            raise ValueError("scan_every must be >= 1")

    def scan_at(self, it: int, forced: bool = False) -> int:
        """Scan size for ALG iteration ``it`` (1-based).

        Between scans the local Newton solve is warm-started from the previous
        (scanned) iterate and follows its branch, so the global search runs on
        the first iteration, every ``scan_every``-th one and the last one.
        """
        if forced or it == 1 or it == self.iterations or it % self.scan_every == 0:
            return self.pointwise_scan
        return 0


# -- node-wise reduced problem ------------------------------------------

class NodeObjective:
    """Reduced Step-B objective, one independent scalar problem per node:

        (rho - r*rbar)^2/(2r) + sum_j r^2 c_j^2 / (2 (r + V_j(rho)))
            + dt * (U(rho) + lin * rho)

    ``terms`` pairs squared coefficients c_j^2 (arrays) with mobilities; ``lin``
    collects potential and frozen convolution at the node.
    """

    def __init__(self, r: float, rbar, terms, energy: EnergySpec | None = None,
                 lin=None, dt: float = 1.0):
        self.r = r
        self.rbar = np.asarray(rbar, dtype=float)
        self.terms = [(np.broadcast_to(np.asarray(c2, dtype=float), self.rbar.shape), mob)
                      for c2, mob in terms]
        self.energy = energy
        self.lin = None if lin is None else np.broadcast_to(np.asarray(lin, dtype=float), self.rbar.shape)
        self.dt = dt

    def _take(self, a, idx):
        if idx is None:
            return a
        return a[idx]

    def _mob(self, mob, idx):
        # node-dependent mobility parameters follow the node subset
        if idx is None or not hasattr(mob, "A"):
            return mob
        A = np.asarray(mob.A)
        B = np.asarray(mob.B)
        return replace(mob, A=A[idx] if A.ndim else A, B=B[idx] if B.ndim else B)

    def value(self, rho, idx=None):
        rho = np.asarray(rho, dtype=float)
        r = self.r
        f = (rho - r * self._take(self.rbar, idx)) ** 2 / (2 * r)
        for c2, mob in self.terms:
            v = self._mob(mob, idx).value(rho)
            f = f + r * r * self._take(c2, idx) / (2 * (r + v))
        if self.energy is not None:
            f = f + self.dt * self.energy.density(rho)
        if self.lin is not None:
            f = f + self.dt * self._take(self.lin, idx) * rho
        return f

    def grad_hess(self, rho, idx=None, hess=True):
        rho = np.asarray(rho, dtype=float)
        r = self.r
        g = (rho - r * self._take(self.rbar, idx)) / r
        h = np.full_like(rho, 1.0 / r)
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            for c2, mob in self.terms:
                c2 = self._take(c2, idx)
                v, d1, d2 = self._mob(mob, idx).derivs(rho)
                den = r + v
                active = c2 > 0
                g = g - np.where(active, r * r * c2 * d1 / (2 * den * den), 0.0)
                if hess:
                    h = h + np.where(active, r * r * c2 * (2 * d1 * d1 - den * d2) / (2 * den ** 3), 0.0)
            if self.energy is not None:
                e1, e2 = self.energy.derivs(rho)
                g = g + self.dt * e1
                h = h + self.dt * e2
        if self.lin is not None:
            g = g + self.dt * self._take(self.lin, idx)
        return g, h

    def grad(self, rho, idx=None):
        return self.grad_hess(rho, idx, hess=False)[0]

    @property
    def nonconcave(self) -> np.ndarray:
        """Per-term flags: True where the mobility is not certified concave."""
        return np.array([not mob.concave for _, mob in self.terms], dtype=np.bool_)

    def maybe_nonconvex(self) -> np.ndarray:
        """Nodes where an active non-concave term can make the problem nonconvex."""
        out = np.zeros(self.rbar.shape, dtype=bool)
        for (c2, _), flag in zip(self.terms, self.nonconcave):
            if flag:
                out |= c2 > 0
        return out

    def pack(self):
        """Flat-array form for the compiled solver, or None if a term is not supported."""
        n = self.rbar.shape[0]
        nt = len(self.terms)
        kind = np.zeros(nt, dtype=np.int64)
        cs, pa, pb = np.zeros(nt), np.zeros(nt), np.zeros(nt)
        LAB, SAB, C2 = np.zeros((nt, n)), np.zeros((nt, n)), np.empty((nt, n))
        for j, (c2, mob) in enumerate(self.terms):
            C2[j] = c2
            if type(mob) is PowerMobility:
                cs[j], pa[j] = mob.c, mob.gamma
            elif type(mob) is LogMeanMobility:
                kind[j] = 1
                cs[j], pa[j], pb[j] = mob.c, mob.alpha, mob.beta
                A = np.broadcast_to(np.asarray(mob.A, dtype=float), (n,))
                B = np.broadcast_to(np.asarray(mob.B, dtype=float), (n,))
                live = (A > 0) & (B > 0)
                with np.errstate(divide="ignore", invalid="ignore"):
                    LAB[j] = np.where(live, np.log(np.where(live, A, 1.0) / np.where(live, B, 1.0)), 0.0)
                    SAB[j] = np.where(live, np.sqrt(A * B), 0.0)
            else:
                return None
        e = self.energy
        ekind, ealpha, em, elog = 0, 0.0, 1.0, 0.0
        if e is not None and e.alpha > 0:
            ealpha, em = e.alpha, e.m
            if e.kappa is not None:
                ekind, elog = 1, float(np.log(e.kappa))
            elif e.m == 1:
                ekind, elog = 1, 1.0
            else:
                ekind = 2
        lin = np.zeros(n) if self.lin is None else np.ascontiguousarray(self.lin, dtype=float)
        return (float(self.r), np.ascontiguousarray(self.rbar), kind, cs, pa, pb, LAB, SAB, C2,
                ekind, float(ealpha), float(em), elog, float(self.dt), lin, self.nonconcave)

    def upper_bound(self):
        s = sum(np.sqrt(c2) for c2, _ in self.terms) if self.terms else 0.0
        return np.maximum(self.r * self.rbar, 0.0) + self.r * s + 1.0


def solve_nodes(obj: NodeObjective, x0=None, tol: float = 1e-12, maxit: int = 200,
                scan: int = 32) -> np.ndarray:
    """Minimize ``obj`` over rho >= 0 independently at every node.

    Newton's method on the critical equation, safeguarded by a bracket
    [lo, hi] with grad(lo) < 0 < grad(hi); a step leaving the bracket is
    replaced by bisection.  Nodes where the one-sided derivative at 0 is
    nonnegative return 0.

    Where a mobility is not concave the node problem may have several local
    minima.  At those nodes ``scan`` log-spaced points over ten decades below
    an upper bound are checked for further sign changes of the derivative,
    and the candidate with the lowest objective wins (``scan=0`` keeps the
    local answer).
    """
    if NODE_BACKEND == "numba":
        packed = obj.pack()
        if packed is not None:
            return _solve_packed(obj, packed, x0, tol, maxit, scan)
    return solve_nodes_numpy(obj, x0, tol, maxit, scan)


def _solve_packed(obj, packed, x0, tol, maxit, scan):
    n = obj.rbar.shape[0]
    x0 = np.zeros(n) if x0 is None else np.ascontiguousarray(x0, dtype=float)
    out = np.empty(n)
    bad = _kernels.solve_nodes_packed(*packed, int(scan), x0, float(tol), int(maxit), out)
    if bad >= 0:
        raise PointwiseSolveError(f"pointwise solve failed at node {bad}: rbar={obj.rbar[bad]!r}, "
                                  f"last iterate={out[bad]!r}")
    return out


def solve_nodes_numpy(obj: NodeObjective, x0=None, tol: float = 1e-12, maxit: int = 200,
                      scan: int = 32) -> np.ndarray:
    """Vectorized reference implementation of :func:`solve_nodes`."""
    rho = _local_numpy(obj, x0, tol, maxit)
    if scan > 0:
        idx = np.flatnonzero(obj.maybe_nonconvex())
        if idx.size:
            rho[idx] = _globalize_numpy(obj, idx, rho[idx], tol, maxit, scan)
    return rho


def _split_numpy(lo, hi, j):
    """Vectorized twin of the compiled safeguard point (geometric over wide brackets)."""
    with np.errstate(over="ignore", under="ignore", invalid="ignore"):
        x0 = hi * 2.0 ** (-(2.0 ** np.minimum(j, 9)))
        x0 = np.where(x0 > 0, x0, 0.5 * hi)
        geo = np.sqrt(lo) * np.sqrt(hi)
        mid = 0.5 * (lo + hi)
    finite = hi < np.inf
    return np.where((lo == 0) & finite, x0, np.where((lo > 0) & finite & (hi > 4 * lo), geo, mid))


def _bracketed_numpy(obj, idx, lo, hi, tol, maxit):
    """Safeguarded Newton on nodes ``idx`` inside brackets grad(lo) < 0 <= grad(hi)."""
    lo, hi = lo.copy(), hi.copy()
    j = np.zeros(idx.size)
    x = _split_numpy(lo, hi, j)
    act = np.arange(idx.size)
    eps = np.finfo(float).eps
    for _ in range(maxit):
        xa = x[act]
        g, h = obj.grad_hess(xa, idx[act])
        la = np.where(g < 0, xa, lo[act])
        ha = np.where(g > 0, xa, hi[act])
        lo[act], hi[act] = la, ha
        with np.errstate(divide="ignore", invalid="ignore"):
            step = g / h
        done = (np.abs(g) <= tol) | (np.abs(step) <= 4 * eps * xa) | (ha - la <= 4 * eps * ha)
        xn = xa - step
        ok = (h > 0) & (xn > la) & (xn < ha)
        j[act] += ~ok
        xn = np.where(ok, xn, _split_numpy(la, ha, j[act]))
        x[act] = np.where(done, xa, xn)
        act = act[~done]
        if act.size == 0:
            break
    return x


def _globalize_numpy(obj, idx, xs, tol, maxit, scan):
    hi = np.maximum(obj.upper_bound()[idx], 2.0 * xs)
    for _ in range(60):
        low = ~(obj.grad(hi, idx) > 0)
        if not low.any():
            break
        hi = np.where(low, 2.0 * hi, hi)
    best = xs.copy()
    fbest = obj.value(best, idx)
    px = np.zeros(idx.size)
    pg = obj.grad(px, idx)
    f0 = obj.value(px, idx)
    take = (pg >= 0) & (f0 < fbest)
    best = np.where(take, 0.0, best)
    fbest = np.where(take, f0, fbest)
    for i in range(scan):
        p = hi * 10.0 ** (-SCAN_DECADES * (scan - 1 - i) / (scan - 1))
        gp = obj.grad(p, idx)
        sel = np.flatnonzero((pg < 0) & (gp >= 0) & ~((px <= xs) & (xs <= p)))
        if sel.size:
            x = _bracketed_numpy(obj, idx[sel], px[sel], p[sel], tol, maxit)
            fx = obj.value(x, idx[sel])
            better = fx < fbest[sel]
            best[sel] = np.where(better, x, best[sel])
            fbest[sel] = np.where(better, fx, fbest[sel])
        px, pg = p, gp
    return best


def _local_numpy(obj: NodeObjective, x0, tol, maxit) -> np.ndarray:
    n = obj.rbar.shape[0]
    rho = np.zeros(n)
    g0 = obj.grad(np.zeros(n))
    interior = ~(g0 >= 0)
    idx = np.flatnonzero(interior)
    if idx.size == 0:
        return rho
    lo = np.zeros(idx.size)
    hi = obj.upper_bound()[idx]
    if x0 is not None:
        hi = np.maximum(hi, 2.0 * np.asarray(x0, dtype=float)[idx])
    for _ in range(200):
        ghi = obj.grad(hi, idx)
        bad = ~(ghi > 0)
        if not bad.any():
            break
        lo = np.where(bad, hi, lo)
        hi = np.where(bad, 2.0 * hi, hi)
        if np.any(hi > 1e15):
            j = idx[np.argmax(hi)]
            raise PointwiseSolveError(f"no bracket for node {j}: rbar={obj.rbar[j]!r}, grad(hi)={ghi.max()!r}")
    x = 0.5 * (lo + hi) if x0 is None else np.asarray(x0, dtype=float)[idx].copy()
    x = np.where((x > lo) & (x < hi), x, 0.5 * (lo + hi))
    act = np.arange(idx.size)
    j = np.zeros(idx.size)
    eps = np.finfo(float).eps
    for _ in range(maxit):
        sub = idx[act]
        xa = x[act]
        g, h = obj.grad_hess(xa, sub)
        la = np.where(g < 0, xa, lo[act])
        ha = np.where(g > 0, xa, hi[act])
        lo[act], hi[act] = la, ha
        step = g / h
        xn = xa - step
        done = (np.abs(g) <= tol) | (np.abs(step) <= 4 * eps * xa) | (ha - la <= 4 * eps * ha)
        bad = ~((xn > la) & (xn < ha))
        j[act] += bad
        xn = np.where(bad, _split_numpy(la, ha, j[act]), xn)
        x[act] = np.where(done, xa, xn)
        act = act[~done]
        if act.size == 0:
            break
    else:
        j = idx[act[0]]
        raise PointwiseSolveError(
            f"pointwise solve did not converge at {act.size} nodes; first node {j}: "
            f"rbar={obj.rbar[j]!r}, rho={x[act[0]]!r}, bracket=({lo[act[0]]!r}, {hi[act[0]]!r})")
    rho[idx] = x
    return rho


def pointwise_density_solve(target: "ShiftedTarget", mob: MobilitySpec, energy: EnergySpec | None,
                            lin, dt: float, r: float, x0=None, tol: float = 1e-12, maxit: int = 200,
                            scan: int = 32):
    """Density update of Step B for a scalar problem."""
    obj = scalar_objective(target, mob, energy, lin, dt, r)
    return solve_nodes(obj, x0, tol, maxit, scan)


def scalar_objective(target, mob: MobilitySpec, energy, lin, dt, r) -> NodeObjective:
    terms = [(target.m0 ** 2, mob.v1x), (target.m1 ** 2, mob.v1y)]
    if mob.v2 is not None and target.s is not None:
        terms.append((target.s ** 2, mob.v2))
    return NodeObjective(r, target.rho, terms, energy, lin, dt)


# -- ALG2 state ----------------------------------------------------------

@dataclass
class PrimalState:
    """u_h = (rho, m0, m1, s); ``s`` is None for pure Wasserstein flows."""

    rho: np.ndarray
    m0: np.ndarray
    m1: np.ndarray
    s: np.ndarray | None = None

    def arrays(self):
        return [getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None]

    def copy(self):
        return type(self)(*(None if a is None else a.copy() for a in
                            (getattr(self, f.name) for f in fields(self))))


class DualState(PrimalState):
    """u*_h, same layout as the primal state."""


class ShiftedTarget(PrimalState):
    """ubar = D Phi + u/r at the nodes."""


def recover_flux_source(rho, target: ShiftedTarget, mob: MobilitySpec, r: float):
    """Closed-form flux and source given the density."""
    v1x = mob.v1x.value(rho)
    v1y = v1x if mob.v1y is mob.v1x else mob.v1y.value(rho)
    m0 = r * v1x / (r + v1x) * target.m0
    m1 = r * v1y / (r + v1y) * target.m1
    s = None
    if target.s is not None:
        v2 = mob.v2.value(rho) if mob.v2 is not None else 0.0
        s = r * v2 / (r + v2) * target.s
    return m0, m1, s


def update_dual(u: PrimalState, target: ShiftedTarget, r: float) -> DualState:
    """u* = ubar - u/r, node by node."""
    return DualState(*(None if t is None else t - a / r
                       for t, a in zip((target.rho, target.m0, target.m1, target.s),
                                       (u.rho, u.m0, u.m1, u.s))))


@dataclass
class AlgState:
    """Iterates carried between ALG iterations and between time steps."""

    u: PrimalState
    ustar: DualState
    phi: np.ndarray

    @classmethod
    def initial(cls, disc: Discretization, rho, with_source: bool):
        z = np.zeros(disc.n_quad)
        s = z.copy() if with_source else None
        return cls(PrimalState(np.array(rho, dtype=float), z.copy(), z.copy(), s),
                   DualState(z.copy(), z.copy(), z.copy(), None if s is None else z.copy()),
                   np.zeros(disc.n_dof))


@dataclass
class StepMonitor:
    energy: float
    mass: float
    alg_residual: float
    iterations: int
    residual_history: list = field(default_factory=list)
    wall_time: float = 0.0


class ScalarProblem:
    """Discretized scalar gradient flow  d_t rho = div(V1 grad dE) - V2 dE."""

    def __init__(self, disc: Discretization, energy: EnergySpec, mobility: MobilitySpec,
                 params: Alg2Params | None = None, conv_mode: str = "fft"):
        self.disc = disc
        self.energy = energy
        self.mobility = mobility
        self.params = params or Alg2Params()
        self.potential = None if energy.potential is None else disc.sample(energy.potential)
        self.convolver = None
        if energy.kernel is not None:
            self.convolver = Convolver(disc, energy.kernel, energy.kernel_singular, conv_mode)
        self.reaction = mobility.has_reaction
        p = self.params
        self.step_a_solver = StepASolver(disc, 2.0 if self.reaction else 1.0, 1.0, p.linear_solver,
                                         p.linear_tol, p.linear_maxit)
        self.op = disc.diff_operator
        if self.reaction and not mobility.convexity_certified():
            log.info("reaction mobility is not certified convex; pointwise problems may be nonconvex")

    def convolution(self, rho):
        return None if self.convolver is None else self.convolver(rho)

    def energy_of(self, rho, conv=None) -> float:
        if self.convolver is not None and conv is None:
            conv = self.convolver(rho)
        return energy_eval(self.energy, self.disc, rho, conv, self.potential)

    def mass_of(self, rho) -> float:
        return self.disc.integrate(rho)

    def initial_state(self, rho) -> AlgState:
        return AlgState.initial(self.disc, rho, self.reaction)

    def linear_part(self, rho_old):
        """Potential plus frozen convolution at the nodes (None when both absent)."""
        lin = self.potential
        conv = self.convolution(rho_old)
        if conv is not None:
            lin = conv if lin is None else lin + conv
        return lin


def step_a(problem: ScalarProblem, phi_prev, u: PrimalState, ustar: DualState, rho_old, r: float):
    """Solve  c(Phi,Psi)_h + (grad Phi, grad Psi)_h = rhs(u, u*, rho_old)  for Phi."""
    f0 = (u.rho - rho_old) / r - ustar.rho
    if u.s is not None:
        f0 = f0 + ustar.s - u.s / r
    fx = ustar.m0 - u.m0 / r
    fy = ustar.m1 - u.m1 / r
    b = problem.op.weighted_rhs(f0, fx, fy)
    return problem.step_a_solver.solve(b, phi_prev)


def shifted_target(problem: ScalarProblem, phi, u: PrimalState, r: float) -> ShiftedTarget:
    val, dx, dy = problem.op.apply(phi)
    s = None if u.s is None else val + u.s / r
    return ShiftedTarget(u.rho / r - val, dx + u.m0 / r, dy + u.m1 / r, s)


def alg2_iteration(problem: ScalarProblem, state: AlgState, rho_old, lin, dt: float,
                   scan: int | None = None) -> float:
    """One ALG2 iteration in place; returns ||u^l - u^{l-1}||_h."""
    p = problem.params
    scan = p.pointwise_scan if scan is None else scan
    r = p.r
    u = state.u
    state.phi = step_a(problem, state.phi, u, state.ustar, rho_old, r)
    tgt = shifted_target(problem, state.phi, u, r)
    rho = pointwise_density_solve(tgt, problem.mobility, problem.energy, lin, dt, r,
                                  x0=u.rho, tol=p.newton_tol, maxit=p.newton_maxit,
                                  scan=scan)
    m0, m1, s = recover_flux_source(rho, tgt, problem.mobility, r)
    new = PrimalState(rho, m0, m1, s)
    w = problem.disc.weights
    res = sum(float(np.dot((a - b) ** 2, w)) for a, b in zip(new.arrays(), u.arrays()))
    state.u = new
    state.ustar = update_dual(new, tgt, r)
    return float(np.sqrt(res))


def jko_step(problem: ScalarProblem, rho_old, state: AlgState | None = None, dt: float = 1.0,
             keep_history: bool = False):
    """Advance one relaxed JKO step; returns (rho_new, StepMonitor, state).

    ``state`` carries the ALG iterates from the previous step (warm start);
    the convolution is frozen at ``rho_old`` for the whole step.
    """
    t0 = time.perf_counter()
    p = problem.params
    rho_old = np.asarray(rho_old, dtype=float)
    if np.any(rho_old < 0):
        raise ValueError("previous density must be nonnegative")
    if state is None:
        state = problem.initial_state(rho_old)
    lin = problem.linear_part(rho_old)
    history = []
    res = np.inf
    it = 0
    forced = False
    for it in range(1, p.iterations + 1):
        scan = p.scan_at(it, forced)
        res = alg2_iteration(problem, state, rho_old, lin, dt, scan)
        if keep_history:
            history.append(res)
        if p.early_exit and res < p.early_tol:
            if scan:
                break
            forced = True  # finish on a globally checked iterate
    rho_new = state.u.rho.copy()
    mon = StepMonitor(problem.energy_of(rho_new), problem.mass_of(rho_new), res, it, history,
                      time.perf_counter() - t0)
    return rho_new, mon, state


def second_variation(target_m2, target_s2, rho, mob: MobilitySpec, energy: EnergySpec | None,
                     dt: float, r: float):
    """Second derivative of the reduced objective (convexity check)."""
    v1 = mob.v1x.derivs(rho)
    out = 1.0 / r + r * r * target_m2 * (2 * v1[1] ** 2 - (r + v1[0]) * v1[2]) / (2 * (r + v1[0]) ** 3)
    if mob.v2 is not None:
        v, d1, d2 = mob.v2.derivs(rho)
        out = out + r * r * target_s2 * (2 * d1 ** 2 - (r + v) * d2) / (2 * (r + v) ** 3)
    if energy is not None:
        out = out + dt * energy.derivs(rho)[1]
    return out
