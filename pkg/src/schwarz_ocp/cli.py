"""Command-line front end: ``solve``, ``schwarz``, ``eds`` and ``benchmark``.

Exit codes: 0 success, 1 bad input, 2 numerical failure.  Set ``SCHWARZ_OCP_LOG``
(e.g. ``INFO`` or ``DEBUG``) to control log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .baselines import AdmmConfig, admm_solve
from .core import StructureError, Trajectory, kkt_residual, write_trajectory_csv
from .lq import ConvexifyBreakdown, IndefiniteW, SingularKkt, dense_kkt_solve, load_lq
from .nlp import EvaluationError, LineSearchFailure, LqOcp, MaxIterations, NlpOcp, SqpOptions, sqp_solve
from .problems import TrigSingularity, quadrotor, thin_plate
from .schwarz import (InvalidOverlap, InvalidPartition, MaxOuterIterations, MissingBoundary,
                      SchwarzConfig, SubproblemFailure, schwarz_solve)
from .sensitivity import (PerturbationSolveError, default_solver, eds_probe, gaussian_perturbations,
                          write_eds_summary)

log = logging.getLogger("schwarz_ocp")

INPUT_ERRORS = (StructureError, InvalidPartition, InvalidOverlap, MissingBoundary, FileNotFoundError,
                json.JSONDecodeError, KeyError, ValueError)
NUMERICAL_ERRORS = (IndefiniteW, SingularKkt, ConvexifyBreakdown, EvaluationError, LineSearchFailure,
                    MaxIterations, SubproblemFailure, MaxOuterIterations, TrigSingularity,
                    PerturbationSolveError, np.linalg.LinAlgError, ArithmeticError)

QUAD_FULL_N = 24000
PLATE_FULL_N = 8640


class Loaded:
    """A selected problem plus the pieces the subcommands need."""

    def __init__(self, name: str, ocp: NlpOcp, lq=None, full_n: int | None = None):
        self.name, self.ocp, self.lq, self.full_n = name, ocp, lq, full_n

    def start(self) -> Trajectory:
        p = self.ocp
        t = Trajectory.zeros(p.N, p.nx, p.nu)
        if self.name == "thinplate":
            # the plate starts at its steady state
            t = Trajectory(np.tile(p.x0, (p.N + 1, 1)), t.u, t.lam)
        return Trajectory(np.vstack([p.x0[None], t.x[1:]]), t.u, t.lam)


def load_problem(name: str, N: int | None, mesh: int) -> Loaded:
    if name == "quadrotor":
        return Loaded(name, quadrotor(N=N or 2400), full_n=QUAD_FULL_N)
    if name == "thinplate":
        return Loaded(name, thin_plate(mesh=mesh, N=N or 360), full_n=PLATE_FULL_N)
    if name.startswith("lqfile:"):
        path = name.split(":", 1)[1]
        if not Path(path).is_file():
            raise FileNotFoundError(f"LQ instance file not found: {path}")
        lq = load_lq(path)
        if N is not None and N != lq.N:
            raise ValueError(f"--N {N} does not match the horizon {lq.N} stored in {path}")
        return Loaded("lqfile", LqOcp(lq), lq=lq)
    raise ValueError(f"unknown problem '{name}' (expected quadrotor, thinplate or lqfile:<path>)")


def default_T(prob: Loaded) -> int:
    # twenty subdomains at full scale; reduced in proportion at desk scale
    N = prob.ocp.N
    if prob.full_n:
        return max(2, min(20, round(20 * N / prob.full_n)))
    return max(1, min(20, N // 10))


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ValueError(f"expected a comma-separated list of numbers, got '{text}'") from None


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _schwarz_cfg(args, T: int, **kw) -> SchwarzConfig:
    overlap = dict(tau=args.tau) if args.tau is not None else dict(tau_rel=args.tau_rel if args.tau_rel is not None else 1.0)
    overlap.update(kw.pop("overlap", {}))
    return SchwarzConfig(T=T, mu=kw.pop("mu", args.mu), tol_pr=args.tol_pr, tol_du=args.tol_du,
                         max_outer=args.max_outer or 100, workers=args.workers, **overlap, **kw)


# ----------------------------------------------------------------------------- subcommands

def cmd_solve(args) -> int:
    prob = load_problem(args.problem, args.N, args.mesh)
    out = _outdir(args)
    if prob.lq is not None:
        t = dense_kkt_solve(prob.lq)
        stat, feas = kkt_residual(prob.ocp, t)
        with open(out / "trace.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "stationarity", "feasibility", "step_length", "merit"])
            w.writerow([0, repr(stat), repr(feas), 1.0, repr(prob.ocp.objective(t))])
        write_trajectory_csv(t, out / "trajectory.csv")
        return 0
    t, rep = sqp_solve(prob.ocp, prob.start(), SqpOptions(tol=args.tol))
    rep.write_trace(out / "trace.csv")
    write_trajectory_csv(t, out / "trajectory.csv")
    if not rep.converged:
        print(f"error: solver did not converge: {rep.message}", file=sys.stderr)
        return 2
    return 0


def cmd_schwarz(args) -> int:
    prob = load_problem(args.problem, args.N, args.mesh)
    out = _outdir(args)
    T = args.T or default_T(prob)
    if args.sweep_overlap:
        rows = []
        for v in _floats(args.sweep_overlap):
            cfg = _schwarz_cfg(args, T, overlap=dict(tau=None, tau_rel=v))
            t0 = time.perf_counter()
            w, rec = schwarz_solve(prob.ocp, cfg, prob.start())
            rows.append((v, len(rec), time.perf_counter() - t0))
            rec.write_csv(out / f"convergence_tau{v:g}.csv")
            cfg.partition(prob.ocp.N).write_report(out / f"partition_tau{v:g}.csv")
        with open(out / "sweep.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["tau_rel", "outer_iters", "wall_s"])
            wr.writerows(rows)
        return 0
    cfg = _schwarz_cfg(args, T)
    part = cfg.partition(prob.ocp.N)
    part.write_report(out / "partition.csv")
    w, rec = schwarz_solve(prob.ocp, cfg, prob.start())
    rec.write_csv(out / "convergence.csv")
    write_trajectory_csv(w, out / "trajectory.csv")
    return 0


def cmd_eds(args) -> int:
    prob = load_problem(args.problem, args.N, args.mesh)
    out = _outdir(args)
    p = prob.ocp
    perts = gaussian_perturbations(p.nx, args.perturbations, args.magnitude, args.seed, args.boundary)
    reports = eds_probe(p, default_solver(args.tol), perts, workers=args.workers, skip=args.skip,
                        floor=args.floor)
    for i, r in enumerate(reports):
        r.write_csv(out / f"eds_{i:03d}.csv")
    write_eds_summary(reports, out / "eds_summary.csv")
    return 0


def cmd_benchmark(args) -> int:
    prob = load_problem(args.problem, args.N, args.mesh)
    out = _outdir(args)
    p = prob.ocp
    T = args.T or default_T(prob)
    # parent-parser actions are shared, so the smaller benchmark budget is applied here
    args.max_outer = args.max_outer or 20
    rows = []
    t, rep = sqp_solve(p, prob.start(), SqpOptions(tol=args.tol))
    for (it, stat, feas, *_), wall in zip(rep.trace, rep.wall):
        rows.append(("centralized", "", it, max(stat, feas), wall))
    central_ok = rep.converged
    for mu in _floats(args.mu_list or str(args.mu)):
        try:
            cfg = _schwarz_cfg(args, T, mu=mu, raise_on_max_outer=False)
            _, rec = schwarz_solve(p, cfg, prob.start())
            rows += [("schwarz", mu, j, k, s) for j, (k, s) in enumerate(zip(rec.kkt, rec.wall_s))]
        except NUMERICAL_ERRORS as exc:
            log.warning("schwarz (mu=%g) failed: %s", mu, exc)
    for rho in _floats(args.admm_rho):
        try:
            cfg = AdmmConfig(T=T, rho=rho, max_iter=args.max_outer, tol_pr=args.tol_pr, tol_du=args.tol_du,
                             workers=args.workers, raise_on_max_iter=False)
            _, rec = admm_solve(p, cfg, prob.start())
            rows += [("admm", rho, j, k, s) for j, (k, s) in enumerate(zip(rec.kkt, rec.wall_s))]
        except NUMERICAL_ERRORS as exc:
            log.warning("admm (rho=%g) failed: %s", rho, exc)
    with open(out / "benchmark.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "param", "iter", "kkt_residual", "wall_s"])
        for m, prm, it, k, s in rows:
            w.writerow([m, prm, it, repr(float(k)), repr(float(s))])
    return 0 if central_ok else 2


# ----------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="schwarz-ocp", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--problem", required=True, help="quadrotor | thinplate | lqfile:<path>")
    common.add_argument("--N", type=int, default=None, help="horizon override")
    common.add_argument("--mesh", type=int, default=5, help="thin-plate nodes per side (boundary included)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--tol", type=float, default=1e-8, help="centralized / inner KKT tolerance")

    decomp = argparse.ArgumentParser(add_help=False)
    decomp.add_argument("--T", type=int, default=None, help="number of subdomains")
    ov = decomp.add_mutually_exclusive_group()
    ov.add_argument("--tau", type=int, default=None, help="overlap in stages")
    ov.add_argument("--tau-rel", type=float, default=None, help="relative overlap (default 1.0)")
    decomp.add_argument("--mu", type=float, default=1.0)
    decomp.add_argument("--tol-pr", type=float, default=1e-6)
    decomp.add_argument("--tol-du", type=float, default=1e-6)
    decomp.add_argument("--max-outer", type=int, default=None, help="outer budget (100; benchmark 20)")

    s = sub.add_parser("solve", parents=[common], help="centralized solve")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("schwarz", parents=[common, decomp], help="overlapping Schwarz solve")
    s.add_argument("--sweep-overlap", default=None, help="comma-separated relative overlaps")
    s.set_defaults(func=cmd_schwarz)

    s = sub.add_parser("eds", parents=[common], help="decay-of-sensitivity probe")
    s.add_argument("--perturbations", type=int, default=30)
    s.add_argument("--magnitude", type=float, default=0.1)
    s.add_argument("--boundary", choices=("initial", "terminal", "both"), default="both")
    s.add_argument("--skip", type=int, default=10, help="stages next to each boundary left out of the fit")
    s.add_argument("--floor", type=float, default=1e-12, help="deviations below this are left out of the fit")
    s.set_defaults(func=cmd_eds, tol=1e-10)

    s = sub.add_parser("benchmark", parents=[common, decomp], help="centralized vs Schwarz vs ADMM")
    s.add_argument("--mu-list", default=None, help="comma-separated Schwarz penalties (overrides --mu)")
    s.add_argument("--admm-rho", default="0.1,1,10", help="comma-separated ADMM penalties")
    s.set_defaults(func=cmd_benchmark)
    return ap


def main(argv=None) -> int:
    level = os.environ.get("SCHWARZ_OCP_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NUMERICAL_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except INPUT_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
