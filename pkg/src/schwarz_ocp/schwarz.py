"""Overlapping Schwarz decomposition in time.

The horizon ``[0, N]`` is split at breakpoints ``m_0 = 0 < ... < m_T = N``;
subdomain ``i`` is expanded to ``[n1_i, n2_i] = [max(m_i - tau_i, 0), min(m_{i+1} + tau_i, N)]``.
Each outer iteration solves all subproblems from boundary data taken from the
current iterate, keeps the non-overlapping pieces and glues them together.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (BoundaryData, StructureError, SubTrajectory, Trajectory, concatenate,
                   kkt_residual, norm_w, restrict)
from .nlp import NlpOcp, SqpOptions, SqpReport, sqp_solve

log = logging.getLogger(__name__)


class InvalidPartition(ValueError):
    pass


class InvalidOverlap(ValueError):
    pass


class MissingBoundary(ValueError):
    pass


class SubproblemFailure(RuntimeError):
    def __init__(self, i: int, outer: int, report: SqpReport):
        super().__init__(f"subproblem {i} failed at outer iteration {outer}: {report.message}")
        self.i, self.outer, self.report = i, outer, report


class MaxOuterIterations(RuntimeError):
    def __init__(self, best: Trajectory, record: "ConvergenceRecord"):
        super().__init__(f"no convergence within {len(record.eps_pr)} outer iterations")
        self.best, self.record = best, record


@dataclass(frozen=True)
class Partition:
    N: int
    m: tuple
    tau: tuple  # overlap per subdomain
    n1: tuple
    n2: tuple

    @property
    def T(self) -> int:
        return len(self.m) - 1

    def report_rows(self):
        return [(i, self.m[i], self.m[i + 1], self.n1[i], self.n2[i]) for i in range(self.T)]

    def write_report(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "m_i", "m_i+1", "n1_i", "n2_i"])
            w.writerows(self.report_rows())


def make_partition(N: int, T: int | None = None, tau: int | None = None,
                   tau_rel: float | None = None, breakpoints: Sequence[int] | None = None) -> Partition:
    """Split ``[0, N]`` into ``T`` near-equal intervals and expand them.

    Args:
        N: horizon length.
        T: number of subdomains; ignored when ``breakpoints`` is given.
        tau: overlap in stages, applied on both sides of every subdomain.
        tau_rel: relative overlap; subdomain ``i`` of length ``len_i`` is expanded
            by ``ceil(tau_rel * len_i / 2)`` stages on each side.
        breakpoints: explicit ``m_0 .. m_T``.
    """
    if (tau is None) == (tau_rel is None):
        raise InvalidOverlap("specify exactly one of tau and tau_rel")
    if breakpoints is not None:
        m = tuple(int(v) for v in breakpoints)
        if m[0] != 0 or m[-1] != N or any(b <= a for a, b in zip(m, m[1:])):
            raise InvalidPartition(f"breakpoints {m} must increase strictly from 0 to {N}")
        T = len(m) - 1
    else:
        if T is None or T < 1:
            raise InvalidPartition("T must be at least 1")
        if T > N:
            raise InvalidPartition(f"T={T} exceeds the horizon N={N}")
        base, extra = divmod(N, T)
        lens = [base + (1 if i < extra else 0) for i in range(T)]
        m = tuple(int(v) for v in np.concatenate([[0], np.cumsum(lens)]))
    if tau is not None:
        if tau < 0:
            raise InvalidOverlap("tau must be nonnegative")
        taus = (int(tau),) * T
    else:
        if tau_rel < 0:
            raise InvalidOverlap("tau_rel must be nonnegative")
        taus = tuple(int(math.ceil(tau_rel * (m[i + 1] - m[i]) / 2 - 1e-12)) for i in range(T))
    n1 = tuple(max(m[i] - taus[i], 0) for i in range(T))
    n2 = tuple(min(m[i + 1] + taus[i], N) for i in range(T))
    return Partition(N, m, taus, n1, n2)


class SubOcp(NlpOcp):
    """The OCP restricted to ``[n1, n2]`` with a fixed initial state and adjusted terminal cost.

    For ``n2 < N`` the terminal cost is
    ``g_{n2}(x, u_bar) - lam_bar . f_{n2}(x, u_bar) + mu/2 ||x - x_bar||^2``.
    """

    def __init__(self, p: NlpOcp, n1: int, n2: int, b: BoundaryData, mu: float):
        if not 0 <= n1 < n2 <= p.N:
            raise StructureError(f"invalid subdomain [{n1}, {n2}]")
        self.base, self.n1, self.n2, self.mu = p, n1, n2, float(mu)
        self.N, self.nx, self.nu = n2 - n1, p.nx, p.nu
        self.x0 = np.asarray(b.x_init, float)
        self.open_end = n2 < p.N
        if self.open_end:
            if b.w_term is None:
                raise MissingBoundary(f"subproblem {b.i} needs terminal boundary data")
            xb, ub, lb = (np.asarray(v, float) for v in b.w_term)
            self.xbar, self.ubar, self.lbar = xb, ub, lb
            self._kt = np.array([n2])

    def stage_cost(self, ks, X, U):
        return self.base.stage_cost(ks + self.n1, X, U)

    def stage_cost_grad(self, ks, X, U):
        return self.base.stage_cost_grad(ks + self.n1, X, U)

    def stage_cost_hess(self, ks, X, U):
        return self.base.stage_cost_hess(ks + self.n1, X, U)

    def dynamics(self, ks, X, U):
        return self.base.dynamics(ks + self.n1, X, U)

    def dynamics_jac(self, ks, X, U):
        return self.base.dynamics_jac(ks + self.n1, X, U)

    def dynamics_hess(self, ks, X, U, L):
        return self.base.dynamics_hess(ks + self.n1, X, U, L)

    def terminal_cost(self, x):
        if not self.open_end:
            return self.base.terminal_cost(x)
        X, U = x[None], self.ubar[None]
        g = self.base.stage_cost(self._kt, X, U)[0]
        f = self.base.dynamics(self._kt, X, U)[0]
        d = x - self.xbar
        return float(g - self.lbar @ f + 0.5 * self.mu * d @ d)

    def terminal_grad(self, x):
        if not self.open_end:
            return self.base.terminal_grad(x)
        X, U = x[None], self.ubar[None]
        gx, _ = self.base.stage_cost_grad(self._kt, X, U)
        A, _ = self.base.dynamics_jac(self._kt, X, U)
        return gx[0] - A[0].T @ self.lbar + self.mu * (x - self.xbar)

    def terminal_hess(self, x):
        if not self.open_end:
            return self.base.terminal_hess(x)
        X, U = x[None], self.ubar[None]
        Gxx, _, _ = self.base.stage_cost_hess(self._kt, X, U)
        Fxx, _, _ = self.base.dynamics_hess(self._kt, X, U, self.lbar[None])
        return Gxx[0] - Fxx[0] + self.mu * np.eye(self.nx)


def boundary_data(p: NlpOcp, part: Partition, i: int, w: Trajectory) -> BoundaryData:
    n1, n2 = part.n1[i], part.n2[i]
    x_init = p.x0 if n1 == 0 else w.x[n1]
    term = None
    if n2 < part.N:
        term = (w.x[n2], w.u[n2], w.lam_at(n2))
    return BoundaryData(i, np.array(x_init, float), None if term is None else tuple(np.array(v) for v in term))


def build_subproblem(p: NlpOcp, part: Partition, i: int, b: BoundaryData, mu: float) -> SubOcp:
    """Subproblem ``i`` over ``[n1_i, n2_i]`` parameterized by boundary data ``b``."""
    if b.i != i:
        raise StructureError(f"boundary data for subdomain {b.i} passed for subdomain {i}")
    return SubOcp(p, part.n1[i], part.n2[i], b, mu)


@dataclass
class SchwarzConfig:
    T: int = 1
    tau: int | None = None
    tau_rel: float | None = None
    mu: float = 1.0
    tol_pr: float = 1e-6
    tol_du: float = 1e-6
    max_outer: int = 100
    sqp: SqpOptions = field(default_factory=SqpOptions)
    workers: int | None = None
    raise_on_max_outer: bool = True

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")
        if (self.tau is None) == (self.tau_rel is None):
            raise InvalidOverlap("specify exactly one of tau and tau_rel")
        if self.tol_pr <= 0 or self.tol_du <= 0 or self.max_outer < 1:
            raise ValueError("tolerances and max_outer must be positive")

    def partition(self, N: int) -> Partition:
        return make_partition(N, self.T, tau=self.tau, tau_rel=self.tau_rel)


@dataclass
class ConvergenceRecord:
    eps_pr: list = field(default_factory=list)
    eps_du: list = field(default_factory=list)
    kkt_stat: list = field(default_factory=list)
    kkt_feas: list = field(default_factory=list)
    err_vs_ref: list = field(default_factory=list)
    wall_s: list = field(default_factory=list)
    inner_iters: list = field(default_factory=list)
    converged: bool = False
    note: str = ""

    def __len__(self):
        return len(self.eps_pr)

    @property
    def kkt(self) -> list:
        return [max(a, b) for a, b in zip(self.kkt_stat, self.kkt_feas)]

    def append(self, eps_pr, eps_du, stat, feas, err, wall, inner):
        self.eps_pr.append(float(eps_pr))
        self.eps_du.append(float(eps_du))
        self.kkt_stat.append(float(stat))
        self.kkt_feas.append(float(feas))
        self.err_vs_ref.append(float("nan") if err is None else float(err))
        self.wall_s.append(float(wall))
        self.inner_iters.append(list(inner))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            if self.note:
                fh.write(f"# {self.note}\n")
            w = csv.writer(fh)
            w.writerow(["iter", "eps_pr", "eps_du", "kkt_stat", "kkt_feas", "err_vs_ref", "wall_s"])
            for j in range(len(self)):
                w.writerow([j] + [repr(v) for v in (self.eps_pr[j], self.eps_du[j], self.kkt_stat[j],
                                                     self.kkt_feas[j], self.err_vs_ref[j], self.wall_s[j])])


def residuals(prev: Trajectory, nxt: Trajectory, subs: Sequence[SubTrajectory],
              part: Partition) -> tuple[float, float]:
    """Seam mismatches ``(eps_pr, eps_du)`` between neighbouring subproblem solutions.

    ``prev`` is accepted for interface symmetry; the residuals only involve the
    subproblem solutions and the concatenated iterate ``nxt``.
    """
    T = part.T
    if T == 1:
        return 0.0, 0.0
    if min(part.tau) < 1:
        raise InvalidOverlap("seam residuals need an overlap of at least one stage")
    epr = edu = 0.0
    for i in range(1, T):
        mi = part.m[i]
        epr = max(epr, float(np.linalg.norm(subs[i - 1].x_at(mi) - nxt.x[mi])))
        edu = max(edu, float(np.linalg.norm(subs[i].lam_at(mi - 1) - nxt.lam_at(mi - 1))))
    return epr, edu


def mu_bar(upsilon_upper: float, gamma_c: float, t: int) -> float:
    """Conservative penalty threshold ``16 U (U^{6t} - U^{4t}) / gamma_C^2``."""
    if upsilon_upper <= 0 or gamma_c <= 0 or t < 1:
        raise ValueError("inputs must be positive")
    U = float(upsilon_upper)
    return 16.0 * U * (U ** (6 * t) - U ** (4 * t)) / gamma_c ** 2


def _solve_one(p, part, i, w, mu, opts):
    b = boundary_data(p, part, i, w)
    sub = build_subproblem(p, part, i, b, mu)
    warm = w.window(part.n1[i], part.n2[i])
    warm = Trajectory(np.vstack([sub.x0[None], warm.x[1:]]), warm.u, warm.lam)
    sol, rep = sqp_solve(sub, warm, opts)
    return SubTrajectory(i, part.n1[i], part.n2[i], sol), rep


def schwarz_iteration(p: NlpOcp, part: Partition, w: Trajectory, mu: float, opts: SqpOptions,
                      outer: int = 0, pool: ThreadPoolExecutor | None = None):
    """One Jacobi sweep: returns ``(new iterate, subsolutions, reports)``."""
    args = [(p, part, i, w, mu, opts) for i in range(part.T)]
    if pool is None:
        out = [_solve_one(*a) for a in args]
    else:
        out = list(pool.map(lambda a: _solve_one(*a), args))
    subs = [o[0] for o in out]
    reps = [o[1] for o in out]
    for i, rep in enumerate(reps):
        if not rep.converged:
            raise SubproblemFailure(i, outer, rep)
    new = concatenate([restrict(s, part) for s in subs], p.N)
    return new, subs, reps


def schwarz_solve(p: NlpOcp, cfg: SchwarzConfig, start: Trajectory,
                  reference: Trajectory | None = None) -> tuple[Trajectory, ConvergenceRecord]:
    """Run the overlapping Schwarz iteration from ``start``.

    Args:
        p: full problem.
        cfg: decomposition and tolerance settings.
        start: initial full iterate; its ``x_0`` should equal ``p.x0``.
        reference: optional centralized solution for error tracking.

    Raises:
        SubproblemFailure: an inner SQP solve did not converge.
        MaxOuterIterations: tolerances not met within ``cfg.max_outer`` sweeps
            (only when ``cfg.raise_on_max_outer`` is set).
    """
    part = cfg.partition(p.N)
    if part.T > 1 and min(part.tau) < 1:
        raise InvalidOverlap("overlap must be at least one stage when T > 1")
    if (start.N, start.nx, start.nu) != (p.N, p.nx, p.nu):
        raise StructureError("start trajectory does not match the problem dimensions")
    rec = ConvergenceRecord()
    w = start
    best, best_kkt = start, math.inf
    t0 = time.perf_counter()
    pool = ThreadPoolExecutor(cfg.workers) if (cfg.workers or 1) > 1 and part.T > 1 else None
    try:
        for outer in range(cfg.max_outer):
            new, subs, reps = schwarz_iteration(p, part, w, cfg.mu, cfg.sqp, outer, pool)
            epr, edu = residuals(w, new, subs, part)
            stat, feas = kkt_residual(p, new)
            err = None if reference is None else norm_w(new - reference)
            rec.append(epr, edu, stat, feas, err, time.perf_counter() - t0, [r.iterations for r in reps])
            log.info("schwarz it=%d eps_pr=%.3e eps_du=%.3e kkt=%.3e", outer, epr, edu, max(stat, feas))
            w = new
            if max(stat, feas) < best_kkt:
                best, best_kkt = new, max(stat, feas)
            if epr <= cfg.tol_pr and edu <= cfg.tol_du:
                rec.converged = True
                return w, rec
    finally:
        if pool is not None:
            pool.shutdown()
    if cfg.raise_on_max_outer:
        raise MaxOuterIterations(best, rec)
    return w, rec
