"""Time loop, monitors, field output and the convergence study."""

from __future__ import annotations

import csv
import json
import logging
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .alg2 import ScalarProblem, jko_step
from .config import ProblemConfig
from .fem import Discretization, UniformMesh, l2_error
from .scenarios import Scenario, build_scenario, time_schedule
from .system import SystemProblem, jko_step_system

log = logging.getLogger(__name__)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


# -- field output --------------------------------------------------------

def lattice(disc: Discretization, n: int):
    """Uniform n x n plot lattice covering the domain, x0 varying fastest."""
    if n < 2:
        raise ValueError("lattice needs at least 2 points per direction")
    m = disc.mesh
    xs = np.linspace(m.xmin, m.xmax, n)
    ys = np.linspace(m.ymin, m.ymax, n)
    X, Y = np.meshgrid(xs, ys)
    return xs, ys, X.ravel(), Y.ravel()


def write_field(fields: dict, disc: Discretization, path, n: int = 129, vtk_path=None):
    """Sample quad fields on the plot lattice and write CSV (and optionally VTK).

    ``fields`` maps column names to quad fields.  Values are evaluated from
    the per-cell polynomials, so the lattice does not need to hit nodes.
    """
    xs, ys, px, py = lattice(disc, n)
    names = list(fields)
    cols = [disc.evaluate(np.asarray(fields[k], dtype=float), px, py) for k in names]
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x0", "x1", *names])
        for i in range(len(px)):
            w.writerow([_fmt(px[i]), _fmt(py[i]), *(_fmt(c[i]) for c in cols)])
    if vtk_path is not None:
        with open(vtk_path, "w") as fh:
            fh.write("# vtk DataFile Version 3.0\n")
            fh.write(f"{path.stem}\nASCII\nDATASET STRUCTURED_POINTS\n")
            fh.write(f"DIMENSIONS {n} {n} 1\n")
            fh.write(f"ORIGIN {_fmt(xs[0])} {_fmt(ys[0])} 0\n")
            fh.write(f"SPACING {_fmt(xs[1] - xs[0])} {_fmt(ys[1] - ys[0])} 1\n")
            fh.write(f"POINT_DATA {n * n}\n")
            for name, c in zip(names, cols):
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                fh.write("\n".join(_fmt(v) for v in c))
                fh.write("\n")
    return path


# -- problem assembly ----------------------------------------------------

def make_discretization(sc: Scenario, bc: str = "neumann") -> Discretization:
    xmin, xmax, ymin, ymax = sc.bounds
    return Discretization(UniformMesh(xmin, xmax, ymin, ymax, sc.nx, sc.ny), sc.degree, bc, sc.degree_y)


def make_problem(sc: Scenario, disc: Discretization, params, conv: str = "fft", split: str = "jacobi"):
    if sc.is_system:
        return SystemProblem(disc, sc.network, params, split)
    return ScalarProblem(disc, sc.energy, sc.mobility, params, conv)


@dataclass
class RunResult:
    status: int
    rho: np.ndarray
    monitors: list = field(default_factory=list)
    out_dir: Path | None = None
    message: str = ""


MONITOR_COLUMNS = ["step", "time", "dt", "energy", "mass"]


def _monitor_row(problem, sc, step, t, dt, rho, mon=None):
    row = {"step": step, "time": t, "dt": dt}
    if sc.is_system:
        row["energy"] = problem.energy_of(rho)
        masses = problem.species_mass(rho)
        row["mass"] = float(masses.sum())
        for name, mval in zip(sc.species_names(), masses):
            row[f"mass_{name}"] = float(mval)
    else:
        row["energy"] = problem.energy_of(rho)
        row["mass"] = problem.mass_of(rho)
    row["alg_residual"] = math.nan if mon is None else mon.alg_residual
    row["alg_iterations"] = 0 if mon is None else mon.iterations
    return row


def _versions():
    import scipy
    out = {"jkofem": __version__, "python": platform.python_version(), "numpy": np.__version__,
           "scipy": scipy.__version__}
    try:
        import numba
        out["numba"] = numba.__version__
    except ImportError:  # pragma: no cover
        pass
    return out


def run(config: ProblemConfig, out_dir=None, write_files: bool = True, progress=None) -> RunResult:
    """Run one scenario as configured; returns a :class:`RunResult` (status 0 on success).

    Files written to the output directory: ``monitors.csv`` (deterministic),
    ``timings.csv`` (wall time per step), ``snapshots/step_NNNNNN.npz`` with
    the node values, the lattice CSV next to each snapshot (plus VTK when
    enabled), and ``manifest.json``.
    """
    sc = config.build_scenario()
    disc = make_discretization(sc, config.bc)
    params = config.alg2_params()
    problem = make_problem(sc, disc, params, config.conv, config.split)
    schedule = time_schedule(sc.dt, sc.final_time, sc.dt_ramp, config.steps)
    rho = sc.initial_density(disc)
    out = Path(out_dir if out_dir is not None else config.out_dir)
    names = sc.species_names()

    monitors = [_monitor_row(problem, sc, 0, 0.0, 0.0, rho)]
    columns = list(monitors[0])
    manifest = {
        "config": config.resolved(),
        "versions": _versions(),
        "seed": None,
        "n_steps": len(schedule),
        "node_count": disc.n_quad,
        "dof_count": disc.n_dof,
        "node_backend": _node_backend(),
    }
    if not sc.is_system:
        manifest["convexity_certified"] = sc.mobility.convexity_certified()
    snap_steps = _snapshot_steps(len(schedule), config.cadence)

    mon_fh = tim_fh = None
    if write_files:
        out.mkdir(parents=True, exist_ok=True)
        (out / "snapshots").mkdir(exist_ok=True)
        mon_fh = open(out / "monitors.csv", "w", newline="")
        tim_fh = open(out / "timings.csv", "w", newline="")
        mon_w = csv.writer(mon_fh)
        tim_w = csv.writer(tim_fh)
        mon_w.writerow(columns)
        mon_w.writerow([_fmt(monitors[0][c]) for c in columns])
        tim_w.writerow(["step", "wall_time"])
        mon_fh.flush()
        _snapshot(out, disc, rho, names, 0, 0.0, config)

    status, message = 0, "ok"
    state = None
    t = 0.0
    try:
        for n, dt in enumerate(schedule, 1):
            t0 = time.perf_counter()
            if sc.is_system:
                rho, mon, state = jko_step_system(problem, rho, state, dt)
            else:
                rho, mon, state = jko_step(problem, rho, state, dt)
            t += dt
            row = _monitor_row(problem, sc, n, t, dt, rho, mon)
            monitors.append(row)
            if write_files:
                mon_w.writerow([_fmt(row[c]) for c in columns])
                tim_w.writerow([n, f"{time.perf_counter() - t0:.6f}"])
                mon_fh.flush()
                if n in snap_steps:
                    _snapshot(out, disc, rho, names, n, t, config)
            if progress is not None:
                progress(row)
    except Exception as exc:  # solver failure: keep the partial monitors
        status, message = 2, f"{type(exc).__name__}: {exc}"
        log.error("run failed at step %d: %s", len(monitors), message)
    finally:
        if write_files:
            mon_fh.close()
            tim_fh.close()
            manifest["status"] = message
            manifest["steps_completed"] = len(monitors) - 1
            (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_json_default))
    return RunResult(status, rho, monitors, out if write_files else None, message)


def _node_backend():
    from . import alg2
    return alg2.NODE_BACKEND


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (tuple, np.ndarray)):
        return list(o)
    return str(o)


def _snapshot_steps(n_steps: int, cadence: int) -> set:
    steps = {n_steps}
    if cadence > 0:
        steps.update(range(cadence, n_steps + 1, cadence))
    return steps


def _snapshot(out: Path, disc, rho, names, step, t, config: ProblemConfig):
    rho2 = np.atleast_2d(rho)
    np.savez(out / "snapshots" / f"step_{step:06d}.npz", rho=rho, time=t, step=step,
             x0=disc.x0, x1=disc.x1, weights=disc.weights)
    vtk = out / "snapshots" / f"step_{step:06d}.vtk" if config.vtk else None
    write_field(dict(zip(names, rho2)), disc, out / "snapshots" / f"step_{step:06d}.csv",
                config.lattice, vtk)


# -- convergence study ---------------------------------------------------

COARSE_CELLS = {1: 8, 2: 4, 3: 2, 4: 2}


@dataclass
class StudyRow:
    degree: int
    level: int
    cells: int
    dim: int
    error: float
    rate: float


def convergence_study(scenario: str = "fokker_planck_steady", degrees=(1, 2, 4), levels: int = 4,
                      steps: int | None = None, dt: float | None = None, iterations: int = 200,
                      r: float = 1.0, reference=None, overintegrate: int | None = None,
                      coarse: dict | None = None) -> list[StudyRow]:
    """Errors against the scenario reference under uniform refinement.

    Coarse meshes default to 8x8 (k=1), 4x4 (k=2) and 2x2 (k=3, 4) so that
    dim V_h^k matches across degrees.  The L2 error is integrated with a
    ``k + 4``-point Gauss rule per cell direction unless ``overintegrate`` is
    given; the rate is log2(e_coarse/e_fine).
    """
    from .alg2 import Alg2Params
    coarse = coarse or COARSE_CELLS
    rows = []
    for k in degrees:
        prev = None
        n0 = coarse.get(k)
        if n0 is None:
            raise ValueError(f"no coarse mesh configured for degree {k}")
        for lvl in range(levels):
            sc = build_scenario(scenario)
            ref = reference or sc.reference
            if ref is None:
                raise ValueError(f"scenario {scenario!r} has no reference solution")
            sc.nx = sc.ny = n0 * 2 ** lvl
            sc.degree = k
            disc = make_discretization(sc)
            prob = make_problem(sc, disc, Alg2Params(r=r, iterations=iterations))
            rho = sc.initial_density(disc)
            nsteps = round(sc.final_time / sc.dt) if steps is None else steps
            state = None
            for _ in range(nsteps):
                rho, _, state = jko_step(prob, rho, state, sc.dt if dt is None else dt)
            err = l2_error(disc, rho, ref, overintegrate=overintegrate or k + 4)
            rate = math.nan if prev is None else math.log2(prev / err)
            rows.append(StudyRow(k, lvl, sc.nx, disc.n_dof, err, rate))
            prev = err
    return rows


def format_study(rows: list[StudyRow]) -> str:
    lines = ["degree,level,cells,dim,l2_error,rate"]
    for r in rows:
        lines.append(f"{r.degree},{r.level},{r.cells},{r.dim},{r.error:.4e},"
                     + ("--" if math.isnan(r.rate) else f"{r.rate:.2f}"))
    return "\n".join(lines)
