"""Run configuration: a line-based ``key = value`` format with sections.

Example::

    scenario = fisher_kpp
    mesh = 32x16

    [scenario]
    mu = 0.5

    [alg2]
    iterations = 200

Keys before the first section header belong to ``[problem]``.  Comments
start with ``#``.  Unknown keys and sections are rejected with the line
number.  Values left unset fall back to the scenario defaults.
"""

from __future__ import annotations

import inspect
from dataclasses import dataclass, field, fields
from pathlib import Path

from .alg2 import Alg2Params
from .linsolve import SOLVERS
from .scenarios import REGISTRY, Scenario, build_scenario
from .system import SPLIT_MODES


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _mesh(s: str) -> tuple[int, int]:
    parts = s.lower().replace(" ", "").split("x")
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise ValueError(f"mesh must look like NX or NXxNY, got {s!r}")
    nx, ny = int(parts[0]), int(parts[1])
    if nx < 1 or ny < 1:
        raise ValueError("mesh sizes must be positive")
    return nx, ny


def _ramp(s: str) -> tuple[float, float, int]:
    parts = s.split(":")
    if len(parts) != 3:
        raise ValueError(f"dt_ramp must be START:END:STEPS, got {s!r}")
    a, b, n = float(parts[0]), float(parts[1]), int(parts[2])
    if a <= 0 or b <= 0 or n < 1:
        raise ValueError("dt_ramp needs positive step sizes and at least one step")
    return a, b, n


def _positive(conv):
    def f(s):
        v = conv(s)
        if v <= 0:
            raise ValueError(f"must be positive, got {s!r}")
        return v
    return f


def _nonneg_int(s):
    v = int(s)
    if v < 0:
        raise ValueError(f"must be >= 0, got {s!r}")
    return v


def _degree(s):
    v = int(s)
    if v < 1:
        raise ValueError(f"polynomial degree must be >= 1, got {v}")
    return v


def _choice(options):
    def f(s):
        v = s.strip()
        if v == "gs":
            v = "gauss-seidel"
        if v not in options:
            raise ValueError(f"must be one of {', '.join(options)}; got {s!r}")
        return v
    return f


# key: (section, parser, default, description); default None = scenario default
SCHEMA = {
    "scenario": ("problem", str, None, "scenario name"),
    "mesh": ("problem", _mesh, None, "cells per direction, NX or NXxNY"),
    "degree": ("problem", _degree, None, "polynomial degree k >= 1"),
    "dt": ("problem", _positive(float), None, "time step size"),
    "dt_ramp": ("problem", _ramp, None, "geometric ramp START:END:STEPS for the first steps"),
    "final_time": ("problem", lambda s: float(s), None, "final time T"),
    "steps": ("problem", _nonneg_int, None, "number of steps (overrides final_time)"),
    "bc": ("problem", _choice(("neumann", "periodic")), "neumann", "boundary condition"),
    "r": ("alg2", _positive(float), 1.0, "augmentation parameter"),
    "iterations": ("alg2", _positive(int), 200, "ALG iterations per time step"),
    "newton_tol": ("alg2", _positive(float), 1e-12, "pointwise critical-equation tolerance"),
    "newton_maxit": ("alg2", _positive(int), 200, "pointwise iteration cap"),
    "pointwise_scan": ("alg2", _nonneg_int, 32, "scan points for nonconvex node problems (0: local only)"),
    "scan_every": ("alg2", _positive(int), 10, "run the node scan every N ALG iterations (and the last)"),
    "rho_min": ("alg2", _positive(float), 1e-12, "positivity floor before logarithms"),
    "early_exit": ("alg2", _bool, False, "stop ALG once the residual is below early_tol"),
    "early_tol": ("alg2", _positive(float), 1e-8, "ALG residual threshold for early_exit"),
    "linear_solver": ("alg2", _choice(SOLVERS), "fdm", "Step-A solver"),
    "linear_tol": ("alg2", _positive(float), 1e-10, "relative residual for iterative Step-A solvers"),
    "linear_maxit": ("alg2", _positive(int), 2000, "iteration cap for iterative Step-A solvers"),
    "split": ("alg2", _choice(SPLIT_MODES), "jacobi", "species splitting for systems"),
    "conv": ("alg2", _choice(("fft", "direct")), "fft", "convolution evaluation"),
    "out_dir": ("output", str, "out", "output directory"),
    "cadence": ("output", _nonneg_int, 0, "snapshot every N steps (0: first and last only)"),
    "lattice": ("output", _positive(int), 129, "plot lattice points per direction"),
    "vtk": ("output", _bool, False, "also write legacy VTK files"),
}
SECTIONS = ("problem", "scenario", "alg2", "output")


@dataclass
class ProblemConfig:
    scenario: str
    mesh: tuple | None = None
    degree: int | None = None
    dt: float | None = None
    dt_ramp: tuple | None = None
    final_time: float | None = None
    steps: int | None = None
    bc: str = "neumann"
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
    split: str = "jacobi"
    conv: str = "fft"
    out_dir: str = "out"
    cadence: int = 0
    lattice: int = 129
    vtk: bool = False
    scenario_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scenario not in REGISTRY:
            raise ConfigError(f"unknown scenario {self.scenario!r}; known: {', '.join(sorted(REGISTRY))}")
        if self.degree is not None and self.degree < 1:
            raise ConfigError(f"polynomial degree must be >= 1, got {self.degree}")
        if self.lattice < 2:
            raise ConfigError("plot lattice needs at least 2 points per direction")
        _check_scenario_params(self.scenario, self.scenario_params)

    def build_scenario(self) -> Scenario:
        """The scenario with this config's overrides applied."""
        sc = build_scenario(self.scenario, **self.scenario_params)
        if self.mesh is not None:
            sc.nx, sc.ny = self.mesh
        if self.degree is not None:
            sc.degree = self.degree
        if self.dt is not None:
            sc.dt = self.dt
            if self.dt_ramp is None:
                sc.dt_ramp = None
        if self.dt_ramp is not None:
            sc.dt_ramp = self.dt_ramp
        if self.final_time is not None:
            sc.final_time = self.final_time
        if sc.degree_y == 0 and sc.ny != 1:
            sc.degree_y = None
        return sc

    def alg2_params(self) -> Alg2Params:
        return Alg2Params(r=self.r, iterations=self.iterations, newton_tol=self.newton_tol,
                          newton_maxit=self.newton_maxit, pointwise_scan=self.pointwise_scan,
                          scan_every=self.scan_every, rho_min=self.rho_min, early_exit=self.early_exit,
                          early_tol=self.early_tol, linear_solver=self.linear_solver,
                          linear_tol=self.linear_tol, linear_maxit=self.linear_maxit)

    def resolved(self) -> dict:
        """Every setting after applying scenario defaults (for the manifest)."""
        sc = self.build_scenario()
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out.update(mesh=[sc.nx, sc.ny], degree=sc.degree, degree_y=sc.degree if sc.degree_y is None else sc.degree_y,
                   dt=sc.dt, dt_ramp=None if sc.dt_ramp is None else list(sc.dt_ramp),
                   final_time=sc.final_time, bounds=list(sc.bounds))
        params = dict(_builder_defaults(self.scenario))
        params.update(self.scenario_params)
        out["scenario_params"] = params
        return out


def _builder_defaults(name):
    sig = inspect.signature(REGISTRY[name])
    return {k: p.default for k, p in sig.parameters.items() if p.default is not inspect.Parameter.empty}


def _check_scenario_params(name, params):
    allowed = _builder_defaults(name)
    for k in params:
        if k not in allowed:
            raise ConfigError(f"scenario {name!r} has no parameter {k!r}"
                              + (f"; known: {', '.join(allowed)}" if allowed else ""))


def parse_config_text(text: str, source: str = "<config>") -> ProblemConfig:
    values: dict = {}
    sparams: dict = {}
    section = "problem"
    scen_lines = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{source}:{lineno}: malformed section header {raw.strip()!r}")
            section = line[1:-1].strip().lower()
            if section not in SECTIONS:
                raise ConfigError(f"{source}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        if not key or not val:
            raise ConfigError(f"{source}:{lineno}: empty key or value")
        if section == "scenario":
            try:
                sparams[key] = float(val)
            except ValueError:
                raise ConfigError(f"{source}:{lineno}: scenario parameter {key!r} must be numeric") from None
            scen_lines[key] = lineno
            continue
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        sec, parser, _, _ = SCHEMA[key]
        if sec != section:
            raise ConfigError(f"{source}:{lineno}: key {key!r} belongs in section [{sec}]")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = parser(val)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    if "scenario" not in values:
        raise ConfigError(f"{source}: missing required key 'scenario'")
    if values["scenario"] not in REGISTRY:
        raise ConfigError(f"{source}: unknown scenario {values['scenario']!r}")
    allowed = _builder_defaults(values["scenario"])
    for k, ln in scen_lines.items():
        if k not in allowed:
            raise ConfigError(f"{source}:{ln}: scenario {values['scenario']!r} has no parameter {k!r}")
    return ProblemConfig(**values, scenario_params=sparams)


def parse_config(path) -> ProblemConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(path))


def describe_schema() -> str:
    """Human-readable list of keys with defaults."""
    lines = []
    for sec in SECTIONS:
        if sec == "scenario":
            lines.append("[scenario]  numeric builder parameters (e.g. mu for fisher_kpp, m for two_species)")
            continue
        lines.append(f"[{sec}]")
        for key, (s, _, default, doc) in SCHEMA.items():
            if s == sec:
                d = "scenario default" if default is None else repr(default)
                lines.append(f"  {key:14s} {doc} (default: {d})")
    return "\n".join(lines)
