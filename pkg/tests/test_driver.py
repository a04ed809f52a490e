import csv
import json
import math
from dataclasses import fields

import numpy as np
import pytest

from jkofem.cli import main
from jkofem.config import ConfigError, ProblemConfig, parse_config, parse_config_text
from jkofem.driver import convergence_study, format_study, make_discretization, make_problem, run, write_field
from jkofem.fem import Discretization, UniformMesh
from jkofem.scenarios import _gaussian, build_scenario, time_schedule


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# -- configuration -------------------------------------------------------

def test_minimal_config_defaults():
    cfg = parse_config_text("scenario = fokker_planck_steady")
    sc = cfg.build_scenario()
    assert (sc.nx, sc.ny, sc.degree, sc.dt, sc.final_time) == (2, 2, 4, 1.0, 10.0)
    assert cfg.r == 1.0 and cfg.iterations == 200 and cfg.conv == "fft" and cfg.split == "jacobi"


def test_degree_zero_rejected():
    with pytest.raises(ConfigError, match="degree"):
        parse_config_text("scenario = fokker_planck_steady\ndegree = 0")


@pytest.mark.parametrize("text,msg", [
    ("degree = 2", "missing"),
    ("scenario = nope", "unknown scenario"),
    ("scenario = fisher_kpp\nfoo = 1", ":2: unknown key"),
    ("scenario = fisher_kpp\n[alg2]\ndt = 1", "belongs in section"),
    ("scenario = fisher_kpp\n[scenario]\nm = 2", "no parameter"),
    ("scenario = fisher_kpp\ndt = -1", "bad value"),
    ("scenario = fisher_kpp\n[bogus]", "unknown section"),
    ("scenario = fisher_kpp\nscenario = two_species", "duplicate"),
])
def test_config_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config_text(text)


def test_dt_ramp_schedule():
    cfg = parse_config_text("scenario = gray_scott_2d\ndt_ramp = 0.01:0.1:40\nsteps = 45")
    sc = cfg.build_scenario()
    sched = time_schedule(sc.dt, sc.final_time, sc.dt_ramp, cfg.steps)
    assert len(sched) == 45
    assert sched[0] == pytest.approx(0.01) and sched[39] == pytest.approx(0.1)
    ratios = np.array(sched[1:40]) / np.array(sched[:39])
    np.testing.assert_allclose(ratios, 10 ** (1 / 39), rtol=1e-12)
    assert all(s == pytest.approx(0.1) for s in sched[40:])


def test_schedule_reaches_final_time():
    sched = time_schedule(0.3, 1.0)
    assert len(sched) == 4 and sum(sched) >= 1.0
    assert time_schedule(0.1, 0.0) == []


def test_scenario_params_and_sections(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\n[problem]\nscenario = fisher_kpp\nmesh = 4x2\n[scenario]\nmu = 0.1\n"
                 "[alg2]\niterations = 5\n[output]\nlattice = 3\n")
    cfg = parse_config(p)
    assert cfg.mesh == (4, 2) and cfg.scenario_params == {"mu": 0.1} and cfg.iterations == 5
    assert cfg.resolved()["scenario_params"]["mu"] == 0.1


def test_registry_complete():
    for name in ["fokker_planck_steady", *(f"aggregation_case{c}" for c in range(1, 6)),
                 *(f"reaction_type{t}" for t in range(1, 4)), "fisher_kpp", "two_species",
                 "gray_scott_1d", "gray_scott_2d"]:
        sc = build_scenario(name)
        assert sc.is_system == (sc.network is not None)
        assert (sc.energy is not None) or sc.is_system


# -- field output --------------------------------------------------------

def test_write_field_constant(tmp_path):
    d = Discretization(UniformMesh(-1, 1, -1, 1, 2, 2), 2)
    path = write_field({"rho": np.full(d.n_quad, 2.5)}, d, tmp_path / "f.csv", n=3)
    rows = read_csv(path)
    assert len(rows) == 9 and all(float(r["rho"]) == pytest.approx(2.5, abs=1e-14) for r in rows)


def test_write_field_linear(tmp_path):
    d = Discretization(UniformMesh(-1, 1, -1, 1, 2, 2), 2)
    path = write_field({"a": d.x0, "b": d.x1}, d, tmp_path / "f.csv", n=3, vtk_path=tmp_path / "f.vtk")
    with open(path) as fh:
        assert fh.readline().strip() == "x0,x1,a,b"
    vals = [float(r["a"]) for r in read_csv(path)]
    np.testing.assert_allclose(vals, [-1, 0, 1] * 3, atol=1e-14)
    vtk = (tmp_path / "f.vtk").read_text()
    assert "DIMENSIONS 3 3 1" in vtk and "SCALARS b double 1" in vtk


def test_write_field_lossless(tmp_path):
    d = Discretization(UniformMesh(0, 1, 0, 1, 1, 1), 1)
    f = np.array([1 / 3, math.pi, math.e, 1e-300])
    # a 2-point lattice hits the corners, where the bilinear field is extrapolated exactly
    rows = read_csv(write_field({"f": f}, d, tmp_path / "f.csv", n=2))
    ref = d.evaluate(f, np.array([0.0, 1.0, 0.0, 1.0]), np.array([0.0, 0.0, 1.0, 1.0]))
    assert [float(r["f"]) for r in rows] == list(ref)


def test_write_field_errors(tmp_path):
    d = Discretization(UniformMesh(0, 1, 0, 1, 1, 1), 1)
    with pytest.raises(ValueError):
        write_field({"f": np.zeros(4)}, d, tmp_path / "f.csv", n=1)
    with pytest.raises(OSError):
        write_field({"f": np.zeros(4)}, d, tmp_path / "missing" / "f.csv", n=2)


# -- runs ----------------------------------------------------------------

def small(scenario="aggregation_case5", **kw):
    base = dict(mesh=(4, 4), degree=2, iterations=20, lattice=5)
    base.update(kw)
    return ProblemConfig(scenario, **base)


def test_zero_length_run(tmp_path):
    res = run(small(final_time=0.0), tmp_path)
    assert res.status == 0
    assert sorted(p.name for p in (tmp_path / "snapshots").iterdir() if p.suffix == ".npz") == ["step_000000.npz"]
    assert len(read_csv(tmp_path / "monitors.csv")) == 1


def test_run_outputs_and_determinism(tmp_path):
    cfg = small(steps=3, cadence=2)
    a = run(cfg, tmp_path / "a")
    b = run(cfg, tmp_path / "b")
    assert a.status == 0 and b.status == 0
    assert (tmp_path / "a" / "monitors.csv").read_bytes() == (tmp_path / "b" / "monitors.csv").read_bytes()
    snaps = sorted(p.name for p in (tmp_path / "a" / "snapshots").iterdir() if p.suffix == ".npz")
    assert snaps == ["step_000000.npz", "step_000002.npz", "step_000003.npz"]
    rows = read_csv(tmp_path / "a" / "monitors.csv")
    times = [float(r["time"]) for r in rows]
    assert all(t1 > t0 for t0, t1 in zip(times, times[1:]))
    assert len(read_csv(tmp_path / "a" / "timings.csv")) == 3


def test_manifest_complete(tmp_path):
    cfg = small(steps=1)
    run(cfg, tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    for f in fields(ProblemConfig):
        assert f.name in man["config"]
    for key in ("versions", "seed", "node_backend", "dof_count", "node_count", "status"):
        assert key in man
    assert man["config"]["bounds"] == [-4.0, 4.0, -4.0, 4.0]
    assert "numpy" in man["versions"]


@pytest.mark.parametrize("scenario", ["aggregation_case5", "two_species"])
def test_monitor_energy_matches_snapshots(tmp_path, scenario):
    cfg = small(scenario, steps=2, cadence=1)
    run(cfg, tmp_path)
    sc = cfg.build_scenario()
    d = make_discretization(sc)
    prob = make_problem(sc, d, cfg.alg2_params())
    rows = read_csv(tmp_path / "monitors.csv")
    for row in rows:
        snap = np.load(tmp_path / "snapshots" / f"step_{int(row['step']):06d}.npz")
        e = prob.energy_of(snap["rho"])
        assert abs(float(row["energy"]) - e) <= 1e-12 * max(1.0, abs(e))
    if scenario == "two_species":
        assert {"mass_rho1", "mass_rho2"} <= set(rows[0])


def test_solver_failure_keeps_partial_monitors(tmp_path, monkeypatch):
    import jkofem.driver as drv
    calls = {"n": 0}
    orig = drv.jko_step

    def failing(*a, **k):
        calls["n"] += 1
        if calls["n"] == 2:
            raise RuntimeError("boom")
        return orig(*a, **k)
    monkeypatch.setattr(drv, "jko_step", failing)
    res = run(small(steps=4), tmp_path)
    assert res.status != 0 and "boom" in res.message
    assert len(read_csv(tmp_path / "monitors.csv")) == 2
    assert json.loads((tmp_path / "manifest.json").read_text())["steps_completed"] == 1


# -- CLI -----------------------------------------------------------------

def test_cli_run_and_errors(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("scenario = aggregation_case5\n[alg2]\niterations = 5\n[output]\nlattice = 3\n")
    out = tmp_path / "o"
    assert main(["run", str(cfg), "--out", str(out), "--mesh", "2", "--degree", "1", "--steps", "1",
                 "--split", "gs"]) == 0
    assert (out / "monitors.csv").exists()
    assert main(["run", str(tmp_path / "missing.cfg")]) == 1
    assert main(["run", str(cfg), "--degree", "0"]) == 1
    assert main(["run", str(cfg), "--mesh", "axb"]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("scenario = fisher_kpp\nwhat = 3\n")
    assert main(["run", str(bad)]) == 1
    assert "bad.cfg:2" in capsys.readouterr().err


def test_cli_study(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("scenario = fokker_planck_steady\nsteps = 0\n")
    assert main(["study", str(cfg), "--degrees", "1", "--levels", "2", "--out", str(tmp_path)]) == 0
    text = (tmp_path / "study.csv").read_text()
    assert text.startswith("degree,level,cells,dim,l2_error,rate")
    assert len(text.strip().splitlines()) == 3


# -- convergence study ---------------------------------------------------

def test_study_requires_reference():
    with pytest.raises(ValueError, match="reference"):
        convergence_study("fisher_kpp", degrees=(1,), levels=1, steps=0)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_interpolation_study_rate(k):
    """Zero steps against the initial data measure the nodal interpolation error: rate k + 1."""
    rows = convergence_study("aggregation_case2", degrees=(k,), levels=4, steps=0,
                             reference=_gaussian(4.0), coarse={k: 4})
    assert abs(rows[-1].rate - (k + 1)) < 0.2
    assert "--" in format_study(rows)


def test_study_dims_match_across_degrees():
    rows = convergence_study("fokker_planck_steady", degrees=(1, 2, 4), levels=2, steps=0)
    dims = {}
    for r in rows:
        dims.setdefault(r.level, set()).add(r.dim)
    assert dims == {0: {81}, 1: {289}}
