"""Command line interface: ``jkofem run CONFIG`` and ``jkofem study CONFIG``.

Set ``JKOFEM_NUM_THREADS`` to cap the BLAS/FFT/numba thread pools; it must
be set before numpy is imported, which this module takes care of.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")


def _apply_thread_env():
    n = os.environ.get("JKOFEM_NUM_THREADS")
    if n:
        for var in _THREAD_VARS:
            os.environ.setdefault(var, n)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jkofem", description="High-order FEM solver for relaxed JKO schemes")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "run one scenario"), ("study", "mesh convergence study")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("config", help="configuration file (key = value with [sections])")
        s.add_argument("--out", help="output directory")
        s.add_argument("--degree", type=int, help="polynomial degree k")
        s.add_argument("--mesh", help="cells, NX or NXxNY")
        s.add_argument("--dt", type=float, help="time step size")
        s.add_argument("--steps", type=int, help="number of time steps")
        s.add_argument("--alg-iters", type=int, help="ALG iterations per step")
        s.add_argument("--r", type=float, help="augmentation parameter")
        s.add_argument("--conv", choices=("direct", "fft"), help="convolution evaluation")
        s.add_argument("--split", choices=("jacobi", "gs", "gauss-seidel"), help="species splitting")
        s.add_argument("--vtk", action="store_true", help="also write VTK files")
        if name == "study":
            s.add_argument("--degrees", default="1,2,4", help="comma separated degrees")
            s.add_argument("--levels", type=int, default=4, help="refinement levels")
    return p


def _apply_overrides(cfg, args):
    from dataclasses import replace
    from .config import ConfigError, _mesh
    kw = {}
    if args.out:
        kw["out_dir"] = args.out
    if args.degree is not None:
        if args.degree < 1:
            raise ConfigError(f"polynomial degree must be >= 1, got {args.degree}")
        kw["degree"] = args.degree
    if args.mesh:
        try:
            kw["mesh"] = _mesh(args.mesh)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if args.dt is not None:
        kw["dt"] = args.dt
    if args.steps is not None:
        kw["steps"] = args.steps
    if args.alg_iters is not None:
        kw["iterations"] = args.alg_iters
    if args.r is not None:
        kw["r"] = args.r
    if args.conv:
        kw["conv"] = args.conv
    if args.split:
        kw["split"] = "gauss-seidel" if args.split == "gs" else args.split
    if args.vtk:
        kw["vtk"] = True
    return replace(cfg, **kw)


def main(argv=None) -> int:
    _apply_thread_env()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .config import ConfigError, parse_config
    from .driver import convergence_study, format_study, run
    try:
        cfg = _apply_overrides(parse_config(args.config), args)
        cfg.alg2_params()
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.command == "run":
        def progress(row):
            if args.verbose:
                print(f"step {row['step']:6d} t={row['time']:.4f} E={row['energy']:.10g} "
                      f"mass={row['mass']:.12g} res={row['alg_residual']:.2e}", flush=True)
        try:
            res = run(cfg, progress=progress)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        if res.status:
            print(f"error: {res.message}", file=sys.stderr)
        else:
            print(f"wrote {res.out_dir}")
        return res.status
    try:
        degrees = tuple(int(d) for d in args.degrees.split(","))
        rows = convergence_study(cfg.scenario, degrees, args.levels, steps=cfg.steps, dt=cfg.dt,
                                 iterations=cfg.iterations, r=cfg.r)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    text = format_study(rows)
    print(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "study.csv"), "w") as fh:
            fh.write(text + "\n")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
