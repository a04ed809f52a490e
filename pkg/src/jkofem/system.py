"""ALG2 for reversible reaction-diffusion systems.

Species i carries a density, a flux (only when it diffuses) and the energy
rho_i (log(kappa_i rho_i) - 1).  Every reaction p carries a source s_p whose
dual component is the stoichiometric combination  sum_i nu_ip Phi_i.

Step A is split by species: species i solves the scalar SPD problem

    (1 + sum_p nu_ip^2) M Phi_i + K Phi_i = rhs_i - sum_{j != i} c_ij M Phi_j

with c_ij = sum_p nu_ip nu_jp; the coupling uses the previous iterate
(``jacobi``) or already-updated species (``gauss-seidel``).  Step B solves one
scalar problem per species and node with the other densities frozen.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .alg2 import Alg2Params, NodeObjective, StepMonitor, solve_nodes
from .fem import Discretization
from .linsolve import StepASolver
from .physics import ReactionNetwork

SPLIT_MODES = ("jacobi", "gauss-seidel")


@dataclass
class SystemPrimal:
    """Densities (M, N), fluxes per diffusing species, sources (R, N)."""

    rho: np.ndarray
    m0: dict
    m1: dict
    s: np.ndarray

    def arrays(self):
        out = list(self.rho)
        for i in sorted(self.m0):
            out += [self.m0[i], self.m1[i]]
        out += list(self.s)
        return out

    def copy(self):
        return SystemPrimal(self.rho.copy(), {i: a.copy() for i, a in self.m0.items()},
                            {i: a.copy() for i, a in self.m1.items()}, self.s.copy())


SystemDual = SystemPrimal
SystemTarget = SystemPrimal


@dataclass
class SystemState:
    u: SystemPrimal
    ustar: SystemPrimal
    phi: np.ndarray  # (M, n_dof)
    phi_val: np.ndarray | None = None  # (M, N) values of Phi at the nodes


def stoich_apply(network: ReactionNetwork, phi) -> np.ndarray:
    """Per-reaction sums  sum_i (alpha_i^p - beta_i^p) phi_i."""
    return network.stoich_apply(phi)


class SystemProblem:
    """Discretized reaction-diffusion system on one mesh."""

    def __init__(self, disc: Discretization, network: ReactionNetwork,
                 params: Alg2Params | None = None, split: str = "jacobi"):
        if split not in SPLIT_MODES:
            raise ValueError(f"unknown split mode {split!r}; choose from {SPLIT_MODES}")
        self.disc = disc
        self.net = network
        self.params = params or Alg2Params()
        self.split = split
        self.op = disc.diff_operator
        # a reaction with both rates zero carries no source and drops out of Step A
        self.active = (network.k_plus > 0) | (network.k_minus > 0)
        nu = network.nu.astype(float) * self.active[:, None]
        self.nu_active = nu
        self.coupling = nu.T @ nu  # c_ij
        p = self.params
        self.solvers = []
        for i in range(network.n_species):
            stiff = 1.0 if network.diffusing(i) else 0.0
            self.solvers.append(StepASolver(disc, 1.0 + self.coupling[i, i], stiff, p.linear_solver,
                                            p.linear_tol, p.linear_maxit))
        self.energies = [network.energy(i) for i in range(network.n_species)]
        self.v1 = [network.transport_mobility(i) if network.diffusing(i) else None
                   for i in range(network.n_species)]

    @property
    def n_species(self):
        return self.net.n_species

    def energy_of(self, rho) -> float:
        return float(sum(self.disc.integrate(self.energies[i].density(rho[i]))
                         for i in range(self.n_species)))

    def mass_of(self, rho) -> float:
        return float(sum(self.disc.integrate(r) for r in rho))

    def species_mass(self, rho) -> np.ndarray:
        return np.array([self.disc.integrate(r) for r in rho])

    def initial_state(self, rho) -> SystemState:
        rho = np.array(rho, dtype=float)
        n = self.disc.n_quad
        diff = [i for i in range(self.n_species) if self.net.diffusing(i)]

        def zeros():
            return SystemPrimal(np.zeros_like(rho), {i: np.zeros(n) for i in diff},
                                {i: np.zeros(n) for i in diff}, np.zeros((self.net.n_reactions, n)))
        u = zeros()
        u.rho = rho.copy()
        phi = np.zeros((self.n_species, self.disc.n_dof))
        return SystemState(u, zeros(), phi, np.zeros((self.n_species, n)))


def step_a_species(problem: SystemProblem, i: int, state: SystemState, rho_old, phi_val, r: float):
    """Solve the species-i Step-A problem; ``phi_val`` holds the coupling values of Phi_j."""
    u, us = state.u, state.ustar
    f0 = (u.rho[i] - rho_old[i]) / r - us.rho[i]
    nu_i = problem.nu_active[:, i]
    for p in np.flatnonzero(nu_i):
        f0 = f0 + nu_i[p] * (us.s[p] - u.s[p] / r)
    for j in range(problem.n_species):
        c = problem.coupling[i, j]
        if j != i and c != 0:
            f0 = f0 - c * phi_val[j]
    fx = fy = None
    if i in u.m0:
        fx = us.m0[i] - u.m0[i] / r
        fy = us.m1[i] - u.m1[i] / r
    b = problem.op.weighted_rhs(f0, fx, fy)
    return problem.solvers[i].solve(b, state.phi[i])


def species_objective(problem: SystemProblem, i: int, tgt: SystemPrimal, rho_frozen, dt: float,
                      r: float) -> NodeObjective:
    """Reduced per-node objective for species i with the others frozen at ``rho_frozen``."""
    net = problem.net
    terms = []
    if problem.v1[i] is not None:
        terms += [(tgt.m0[i] ** 2, problem.v1[i]), (tgt.m1[i] ** 2, problem.v1[i])]
    for p in net.reactions_of(i):
        terms.append((tgt.s[p] ** 2, net.species_reaction_mobility(p, i, rho_frozen)))
    return NodeObjective(r, tgt.rho[i], terms, problem.energies[i], None, dt)


def pointwise_species_solve(problem: SystemProblem, i: int, tgt: SystemPrimal, rho_frozen, dt: float,
                            r: float, x0=None, scan: int | None = None) -> np.ndarray:
    p = problem.params
    obj = species_objective(problem, i, tgt, rho_frozen, dt, r)
    return solve_nodes(obj, x0, p.newton_tol, p.newton_maxit, p.pointwise_scan if scan is None else scan)


def recover_system(problem: SystemProblem, rho, tgt: SystemPrimal, r: float):
    """Closed-form fluxes and sources given all densities."""
    m0, m1 = {}, {}
    for i in tgt.m0:
        v = problem.v1[i].value(rho[i])
        f = r * v / (r + v)
        m0[i] = f * tgt.m0[i]
        m1[i] = f * tgt.m1[i]
    s = np.empty_like(tgt.s)
    for p in range(problem.net.n_reactions):
        v = problem.net.reaction_mobility(p, rho)
        s[p] = r * v / (r + v) * tgt.s[p]
    return m0, m1, s


def system_iteration(problem: SystemProblem, state: SystemState, rho_old, dt: float,
                     scan: int | None = None) -> float:
    """One ALG2 iteration in place; returns ||u^l - u^{l-1}||_h."""
    r = problem.params.r
    M = problem.n_species
    u = state.u
    op = problem.op
    gs = problem.split == "gauss-seidel"
    # Step A, split by species
    phi_val = state.phi_val.copy()
    grads = {}
    new_phi = np.empty_like(state.phi)
    for i in range(M):
        new_phi[i] = step_a_species(problem, i, state, rho_old, phi_val if gs else state.phi_val, r)
        if i in u.m0:
            phi_val[i], gx, gy = op.apply(new_phi[i])
            grads[i] = (gx, gy)
        else:
            phi_val[i] = op.apply(new_phi[i], grad=False)
    state.phi = new_phi
    state.phi_val = phi_val
    # shifted targets
    tgt = SystemPrimal(u.rho / r - phi_val,
                       {i: grads[i][0] + u.m0[i] / r for i in u.m0},
                       {i: grads[i][1] + u.m1[i] / r for i in u.m1},
                       problem.nu_active @ phi_val + u.s / r)
    # Step B, per species
    frozen = u.rho.copy()
    rho = np.empty_like(u.rho)
    for i in range(M):
        rho[i] = pointwise_species_solve(problem, i, tgt, frozen, dt, r, x0=u.rho[i], scan=scan)
        if gs:
            frozen[i] = rho[i]
    m0, m1, s = recover_system(problem, rho, tgt, r)
    new = SystemPrimal(rho, m0, m1, s)
    w = problem.disc.weights
    res = sum(float(np.dot((a - b) ** 2, w)) for a, b in zip(new.arrays(), u.arrays()))
    # Step C
    state.ustar = SystemPrimal(tgt.rho - rho / r,
                               {i: tgt.m0[i] - m0[i] / r for i in m0},
                               {i: tgt.m1[i] - m1[i] / r for i in m1},
                               tgt.s - s / r)
    state.u = new
    return float(np.sqrt(res))


def jko_step_system(problem: SystemProblem, rho_old, state: SystemState | None = None, dt: float = 1.0,
                    keep_history: bool = False):
    """Advance the system one relaxed JKO step; returns (rho_new, StepMonitor, state)."""
    t0 = time.perf_counter()
    p = problem.params
    rho_old = np.asarray(rho_old, dtype=float)
    if rho_old.shape != (problem.n_species, problem.disc.n_quad):
        raise ValueError(f"densities have shape {rho_old.shape}, expected "
                         f"({problem.n_species}, {problem.disc.n_quad})")
    if np.any(rho_old < 0):
        raise ValueError("previous densities must be nonnegative")
    if state is None:
        state = problem.initial_state(rho_old)
    history = []
    res = np.inf
    it = 0
    forced = False
    for it in range(1, p.iterations + 1):
        scan = p.scan_at(it, forced)
        res = system_iteration(problem, state, rho_old, dt, scan)
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
