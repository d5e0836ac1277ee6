"""Parametric sensitivity: the directional-derivative LQP and decay-of-sensitivity probes."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import StructureError, Trajectory, kkt_residual
from .lq import LqProblem
from .nlp import NlpOcp, SqpOptions, sqp_solve

log = logging.getLogger(__name__)


class NotAtKkt(ValueError):
    pass


class PerturbationSolveError(RuntimeError):
    def __init__(self, index: int, perturbation: "Perturbation", cause: BaseException):
        super().__init__(f"perturbed solve {index} ({perturbation.boundary}, "
                         f"magnitude {perturbation.magnitude:.3g}) failed: {cause}")
        self.index, self.perturbation = index, perturbation


@dataclass(frozen=True)
class Direction:
    """Perturbation direction ``l_{-1:N}``: ``init`` moves ``x0``, ``data[k]`` moves ``d_k``."""

    init: np.ndarray
    data: np.ndarray | None = None

    @classmethod
    def initial(cls, e) -> "Direction":
        return cls(np.asarray(e, float))


def build_sensitivity_lqp(p: NlpOcp, at: Trajectory, direction: Direction,
                          kkt_tol: float = 1e-8) -> LqProblem:
    """LQP whose primal-dual solution is the directional derivative of the solution at ``at``.

    Second derivatives are halved to fit the no-1/2 quadratic convention, so the
    LQP multipliers are the derivatives of the multipliers themselves.

    Raises:
        NotAtKkt: if ``at`` is not a KKT point within ``kkt_tol``.
    """
    if p.free_initial:
        raise StructureError("sensitivity LQPs need a fixed initial state")
    stat, feas = kkt_residual(p, at)
    if max(stat, feas) > kkt_tol:
        raise NotAtKkt(f"base point is not stationary (stat={stat:.2e}, feas={feas:.2e})")
    N, nx = p.N, p.nx
    ks = np.arange(N)
    X, U, L = at.x[:N], at.u, at.lam[1:]
    Gxx, Gux, Guu = p.stage_cost_hess(ks, X, U)
    Fxx, Fux, Fuu = p.dynamics_hess(ks, X, U, L)
    A, B = p.dynamics_jac(ks, X, U)
    Q = 0.5 * (Gxx - Fxx)
    R = 0.5 * (Guu - Fuu)
    kw = {}
    if direction.data is not None:
        if p.nd == 0:
            raise StructureError("problem has no stage data to perturb")
        Dx, Du = p.stage_data_hess(ks, X, U, L)
        kw = dict(D1=0.5 * Dx, D2=0.5 * Du, C=p.dynamics_data_jac(ks, X, U),
                  DN=0.5 * p.terminal_data_hess(at.x[N]), l=direction.data)
    init = np.zeros(nx) if direction.init is None else direction.init
    return LqProblem(Q=0.5 * (Q + Q.transpose(0, 2, 1)), S=0.5 * (Gux - Fux),
                     R=0.5 * (R + R.transpose(0, 2, 1)), A=A, B=B,
                     QN=0.5 * p.terminal_hess(at.x[N]), x0=init, **kw)


# ----------------------------------------------------------------------------- decay probes

@dataclass(frozen=True)
class Perturbation:
    """Boundary perturbation: ``dx0`` shifts the initial state, ``dref`` the terminal reference."""

    dx0: np.ndarray | None = None
    dref: np.ndarray | None = None

    @property
    def boundary(self) -> str:
        if self.dx0 is not None and self.dref is not None:
            return "both"
        return "initial" if self.dx0 is not None else "terminal"

    @property
    def magnitude(self) -> float:
        parts = [np.linalg.norm(v) for v in (self.dx0, self.dref) if v is not None]
        return float(max(parts)) if parts else 0.0

    def apply(self, p: NlpOcp) -> NlpOcp:
        q = p
        if self.dx0 is not None:
            q = q.with_initial_state(p.x0 + self.dx0)
        if self.dref is not None:
            q = q.with_terminal_shift(self.dref)
        return q


def gaussian_perturbations(nx: int, count: int, magnitude: float, seed: int = 0,
                           boundary: str = "both") -> list[Perturbation]:
    """Seeded Gaussian boundary perturbations scaled so each block has norm ``magnitude``."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        blocks = []
        for _side in range(2):
            v = rng.standard_normal(nx)
            blocks.append(magnitude * v / np.linalg.norm(v))
        dx0 = blocks[0] if boundary in ("initial", "both") else None
        dref = blocks[1] if boundary in ("terminal", "both") else None
        out.append(Perturbation(dx0, dref))
    return out


@dataclass
class EdsReport:
    deviations: np.ndarray  # d_k for k = -1 .. N
    rho_hat: float
    upsilon_hat: float
    boundary: str
    magnitude: float
    fit_points: int

    @property
    def N(self) -> int:
        return len(self.deviations) - 2

    def at(self, k: int) -> float:
        return float(self.deviations[k + 1])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "deviation"])
            for j, d in enumerate(self.deviations):
                w.writerow([j - 1, repr(float(d))])


def write_eds_summary(reports: Sequence[EdsReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rho_hat", "upsilon_hat", "boundary", "magnitude"])
        for r in reports:
            w.writerow([repr(r.rho_hat), repr(r.upsilon_hat), r.boundary, repr(r.magnitude)])


def fit_decay(dev: np.ndarray, boundary: str, magnitude: float, skip: int = 10,
              floor: float = 1e-12, min_points: int = 5) -> tuple[float, float, int]:
    """Log-linear fit ``log d = log(U m) + dist log rho`` away from the perturbed boundary.

    ``dev`` is indexed by slot ``j = k + 1``.  For two-sided perturbations the
    fit uses the first half of the horizon, measured from the initial side.
    Returns ``(rho_hat, upsilon_hat, points)``; the estimates are NaN when fewer
    than ``min_points`` stages qualify.
    """
    n = len(dev)
    dist = np.arange(n, dtype=float) if boundary != "terminal" else np.arange(n)[::-1].astype(float)
    keep = (dist >= skip) & (dist <= n - 1 - skip) & (dev > floor)
    if boundary == "both":
        keep &= dist <= (n - 1) / 2
    pts = int(keep.sum())
    if pts < min_points or magnitude <= 0:
        return float("nan"), float("nan"), pts
    slope, icpt = np.polyfit(dist[keep], np.log(dev[keep]), 1)
    return float(np.exp(slope)), float(np.exp(icpt) / magnitude), pts


def default_solver(tol: float = 1e-10) -> Callable[[NlpOcp, Trajectory], Trajectory]:
    opts = SqpOptions(tol=tol, raise_on_failure=True)

    def solve(q: NlpOcp, start: Trajectory) -> Trajectory:
        return sqp_solve(q, start, opts)[0]

    return solve


def eds_probe(p: NlpOcp, solver: Callable[[NlpOcp, Trajectory], Trajectory] | None,
              perturbations: Sequence[Perturbation], reference: Trajectory | None = None,
              workers: int | None = None, skip: int = 10, floor: float = 1e-12) -> list[EdsReport]:
    """Solve each perturbed problem and measure stagewise deviation from the reference.

    Args:
        p: nominal problem.
        solver: ``solver(problem, start) -> Trajectory``; defaults to tight SQP.
        perturbations: boundary perturbations to apply.
        reference: nominal solution (computed with ``solver`` from zeros if omitted).
        workers: thread count for independent perturbed solves.
        skip: stages excluded next to each boundary in the decay fit.
        floor: deviations at or below this value are excluded from the fit.
    """
    solver = solver or default_solver()
    if reference is None:
        reference = solver(p, Trajectory.zeros(p.N, p.nx, p.nu))

    def run(idx_pert):
        idx, pert = idx_pert
        if pert.magnitude == 0.0:
            dev = np.zeros(p.N + 2)
        else:
            try:
                sol = solver(pert.apply(p), reference)
            except Exception as exc:  # re-raised with the descriptor attached
                raise PerturbationSolveError(idx, pert, exc) from exc
            dev = (sol - reference).stage_norms()
        rho, ups, pts = fit_decay(dev, pert.boundary, pert.magnitude, skip, floor)
        return EdsReport(dev, rho, ups, pert.boundary, pert.magnitude, pts)

    items = list(enumerate(perturbations))
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(run, items))
    return [run(it) for it in items]
