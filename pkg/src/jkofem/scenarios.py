"""Named experiment setups.

Every builder returns a :class:`Scenario` that fixes the domain, default
mesh and degree, time stepping, the energy and mobilities (or reaction
network), and the initial data.  Keyword parameters expose the few knobs
that the experiments vary (reaction strength, mobility exponent, ...).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fem import Discretization, gauss_legendre_1d
from .physics import (EnergySpec, LogMeanMobility, MobilitySpec, PowerMobility, ReactionNetwork)


@dataclass
class Scenario:
    name: str
    bounds: tuple  # (xmin, xmax, ymin, ymax)
    nx: int
    ny: int
    degree: int
    dt: float
    final_time: float
    initial: Callable  # (x0, x1) -> density array, or (M, ...) array for systems
    energy: EnergySpec | None = None
    mobility: MobilitySpec | None = None
    network: ReactionNetwork | None = None
    dt_ramp: tuple | None = None  # (dt_start, dt_end, n_steps)
    degree_y: int | None = None
    reference: Callable | None = None  # exact or steady solution
    conservative: bool = False  # mass conserved by the continuous flow
    params: dict = field(default_factory=dict)
    description: str = ""

    @property
    def is_system(self) -> bool:
        return self.network is not None

    def initial_density(self, disc: Discretization) -> np.ndarray:
        rho = np.asarray(self.initial(disc.x0, disc.x1), dtype=float)
        if self.is_system:
            return np.broadcast_to(rho, (self.network.n_species, disc.n_quad)).copy()
        return np.broadcast_to(rho, (disc.n_quad,)).copy()

    def species_names(self) -> list[str]:
        if self.is_system:
            names = self.network.names
            return list(names) if names else [f"rho{i + 1}" for i in range(self.network.n_species)]
        return ["rho"]


# -- Fokker-Planck steady state ------------------------------------------

def _fp_steady(x0, x1):
    return np.sqrt(np.maximum(4.0 - x0 ** 2 - x1 ** 2, 0.0) / 3.0)


def steady_mass(n: int = 64) -> float:
    """Mass of the steady Fokker-Planck state on [-1, 1]^2 by tensor Gauss-Legendre."""
    t, w = gauss_legendre_1d(n)
    x = 2.0 * t - 1.0
    X, Y = np.meshgrid(x, x)
    return float(np.sum(np.outer(2 * w, 2 * w) * _fp_steady(X, Y)))


def fokker_planck_steady() -> Scenario:
    """Porous-medium drift flow with U = rho^3/2, V = |x|^2/2 on [-1, 1]^2.

    The steady state is sqrt((4 - |x|^2)/3); the run starts from the constant
    with the same mass.
    """
    c = steady_mass() / 4.0
    return Scenario(
        "fokker_planck_steady", (-1.0, 1.0, -1.0, 1.0), 2, 2, 4, 1.0, 10.0,
        lambda x0, x1: np.full(np.shape(x0), c),
        energy=EnergySpec(alpha=1.0, m=3.0, potential=lambda x0, x1: 0.5 * (x0 ** 2 + x1 ** 2)),
        mobility=MobilitySpec(PowerMobility(1.0, 1.0)),
        reference=_fp_steady, conservative=True,
        description="Wasserstein flow relaxing to a known steady state")


# -- aggregation cases ---------------------------------------------------

def _log_kernel(x0, x1):
    r2 = x0 ** 2 + x1 ** 2
    return 0.5 * r2 - 0.5 * np.log(r2)


def _quartic_kernel(x0, x1):
    r2 = x0 ** 2 + x1 ** 2
    return 0.25 * r2 ** 2 - 0.5 * r2


def _gauss_kernel(x0, x1):
    return -np.exp(-(x0 ** 2 + x1 ** 2)) / np.pi


def _log_potential(x0, x1):
    return -0.125 * np.log(x0 ** 2 + x1 ** 2)


def _gaussian(scale):
    a = 25.0 / scale
    return lambda x0, x1: a / (2.0 * np.pi) * np.exp(-0.5 * a * (x0 ** 2 + x1 ** 2))


def aggregation(case: int) -> Scenario:
    """Aggregation-drift-diffusion case 1..5."""
    if case == 1:
        en = EnergySpec(kernel=_quartic_kernel)
        L, init, dt, T = 1.0, _gaussian(1.0), 0.05, 10.0
    elif case in (2, 3, 4):
        pot = None if case == 2 else _log_potential
        alpha, m = (0.1, 2.0) if case == 4 else (0.0, 1.0)
        en = EnergySpec(alpha=alpha, m=m, potential=pot, kernel=_log_kernel, kernel_singular=True)
        L, init, dt, T = 1.5, _gaussian(4.0), 0.05, 3.0
    elif case == 5:
        en = EnergySpec(alpha=0.2, m=3.0, kernel=_gauss_kernel)
        L, dt, T = 4.0, 0.5, 15.0

        def init(x0, x1):
            return np.where((np.abs(x0) <= 3.0) & (np.abs(x1) <= 3.0), 0.25, 0.0)
    else:
        raise ValueError(f"aggregation case must be 1..5, got {case}")
    return Scenario(f"aggregation_case{case}", (-L, L, -L, L), 32, 32, 4, dt, T, init,
                    energy=en, mobility=MobilitySpec(PowerMobility(1.0, 1.0)), conservative=True,
                    params={"case": case}, description=f"aggregation case {case}")


def reaction(type_: int) -> Scenario:
    """Case-4 energy with a reaction term of type 1 (constant), 2 (linear) or 3 (log mean)."""
    base = aggregation(4)
    if type_ == 1:
        v2 = PowerMobility(0.1, 0.0)
    elif type_ == 2:
        v2 = PowerMobility(0.1, 1.0)
    elif type_ == 3:
        v2 = LogMeanMobility(0.1, 1.0, 1.0, 1.0, 0.0)
    else:
        raise ValueError(f"reaction type must be 1..3, got {type_}")
    base.name = f"reaction_type{type_}"
    base.mobility = MobilitySpec(PowerMobility(1.0, 1.0), v2=v2)
    base.conservative = False
    base.params = {"type": type_}
    base.description = f"scalar reaction-diffusion, reaction type {type_}"
    return base


def fisher_kpp(mu: float = 0.5, lambda1: float = 0.1, lambda2: float = 0.01) -> Scenario:
    """Anisotropic Fisher-KPP flow with V2 = mu*rho(rho-1)/log(rho)."""
    if mu <= 0 or lambda1 <= 0 or lambda2 <= 0:
        raise ValueError("Fisher-KPP parameters must be positive")

    def init(x0, x1):
        q = x0 ** 2 + 4.0 * x1 ** 2
        return np.where(q <= 0.25, 1.0, np.exp(-10.0 * (q - 0.25)))
    mob = MobilitySpec(PowerMobility(lambda1, 1.0), PowerMobility(lambda2, 1.0),
                       LogMeanMobility(mu, 1.0, 1.0, 2.0, 1.0))
    return Scenario("fisher_kpp", (-2.0, 2.0, -1.0, 1.0), 32, 16, 4, 0.1, 4.0, init,
                    energy=EnergySpec(alpha=1.0, kappa=1.0), mobility=mob,
                    params={"mu": mu, "lambda1": lambda1, "lambda2": lambda2},
                    description="Fisher-KPP with anisotropic diffusion")


# -- systems -------------------------------------------------------------

def two_species(m: float = 1.0, k_plus: float = 1.0, k_minus: float = 0.1,
                gamma1: float = 0.2, gamma2: float = 0.1) -> Scenario:
    """X1 + 2 X2 <=> 3 X2 with V_{1,1} = gamma1*rho^m and V_{1,2} = gamma2*rho."""
    net = ReactionNetwork([[1, 2]], [[0, 3]], k_plus, k_minus, [gamma1, gamma2],
                          kappa=[k_plus, k_minus], diffusion_exponent=[m, 1.0], names=["rho1", "rho2"])

    def init(x0, x1):
        t = np.tanh(10.0 * (np.hypot(x0, x1) - 0.2))
        return np.stack([0.5 * (1.0 - t), 0.5 * (1.0 + t)])
    return Scenario("two_species", (-1.0, 1.0, -1.0, 1.0), 16, 16, 4, 0.05, 2.0, init,
                    network=net, conservative=True,
                    params={"m": m, "k_plus": k_plus, "k_minus": k_minus, "gamma1": gamma1, "gamma2": gamma2},
                    description="two-species reversible reaction-diffusion")


GS_RATES_PLUS = (1.0, 8.4e-2, 2.4e-2)


def gray_scott_network(gamma=(1.0, 0.01, 0.0, 0.0), ratio: float = 1e-3) -> ReactionNetwork:
    """Reversible 4-species Gray-Scott network; backward rates are ``ratio`` times the forward ones."""
    kp = np.array(GS_RATES_PLUS)
    km = ratio * kp
    kappa = [1.0, km[0] / kp[0], km[0] / kp[0] * km[1] / kp[1], km[2] / kp[2]]
    return ReactionNetwork([[1, 2, 0, 0], [0, 1, 0, 0], [1, 0, 0, 0]],
                           [[0, 3, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]],
                           kp, km, gamma, kappa=kappa, names=["rho1", "rho2", "rho3", "rho4"])


def _bump(x):
    return np.where((x >= -1.0) & (x <= 0.0), x ** 2 * (x + 1.0) ** 2,
                    np.where((x > 0.0) & (x <= 1.0), x ** 2 * (1.0 - x) ** 2, 0.0))


def _gs_state(r2):
    one = np.ones_like(r2)
    return np.stack([1.0 - 2.0 * r2, r2, one, 1000.0 * one])


def gray_scott_1d() -> Scenario:
    """Gray-Scott on [-16, 16], one cell thick in y with constants across it."""
    return Scenario("gray_scott_1d", (-16.0, 16.0, 0.0, 1.0), 32, 1, 4, 0.1, 1600.0,
                    lambda x0, x1: _gs_state(0.15 + 0.25 * _bump(x0)),
                    network=gray_scott_network(), dt_ramp=(0.01, 0.1, 40), degree_y=0,
                    description="reversible Gray-Scott, 1D")


def gray_scott_2d() -> Scenario:
    return Scenario("gray_scott_2d", (-8.0, 8.0, -8.0, 8.0), 16, 16, 4, 0.1, 500.0,
                    lambda x0, x1: _gs_state(0.15 + 4.0 * _bump(x0) * _bump(x1)),
                    network=gray_scott_network(), dt_ramp=(0.01, 0.1, 40),
                    description="reversible Gray-Scott, 2D")


REGISTRY: dict[str, Callable[..., Scenario]] = {
    "fokker_planck_steady": fokker_planck_steady,
    **{f"aggregation_case{c}": (lambda c=c: aggregation(c)) for c in range(1, 6)},
    **{f"reaction_type{t}": (lambda t=t: reaction(t)) for t in range(1, 4)},
    "fisher_kpp": fisher_kpp,
    "two_species": two_species,
    "gray_scott_1d": gray_scott_1d,
    "gray_scott_2d": gray_scott_2d,
}


def build_scenario(name: str, **params) -> Scenario:
    """Look up ``name`` in the registry and build it with the given parameters."""
    try:
        builder = REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; known: {', '.join(sorted(REGISTRY))}") from None
    try:
        return builder(**params)
    except TypeError as exc:
        raise ValueError(f"bad parameters for scenario {name!r}: {exc}") from None


def time_schedule(dt: float, final_time: float, ramp: tuple | None = None, steps: int | None = None):
    """List of step sizes.

    With ``ramp = (a, b, n)`` the first n steps grow geometrically from a to b
    (dt_j = a*(b/a)**(j/(n-1))) and later steps use b.  Without ``steps`` the
    schedule stops once the accumulated time reaches ``final_time``; the last
    step is not shortened.
    """
    if final_time < 0:
        raise ValueError("final time must be >= 0")
    if steps is not None and steps < 0:
        raise ValueError("step count must be >= 0")

    def dt_of(j):
        if ramp is None:
            return dt
        a, b, n = ramp
        if j >= n:
            return b
        return a * (b / a) ** (j / max(n - 1, 1))
    out = []
    t = 0.0
    j = 0
    while True:
        if steps is not None:
            if j >= steps:
                break
        elif t >= final_time * (1.0 - 1e-12):
            break
        d = dt_of(j)
        if d <= 0:
            raise ValueError("time step must be positive")
        out.append(d)
        t += d
        j += 1
    return out
