"""Consensus ADMM on duplicated seam states, used as a temporal-decomposition baseline.

Subdomain ``i`` covers ``[m_i, m_{i+1}]`` without overlap.  The seam state
``x_{m_j}`` appears twice: as the terminal state of subproblem ``j-1`` (left copy)
and as the free initial state of subproblem ``j`` (right copy).  Each copy is tied
to a consensus value ``z_j`` by the scaled augmented term ``rho/2 ||x - z_j + y||^2``.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import StructureError, SubTrajectory, Trajectory, concatenate, kkt_residual, norm_w, restrict
from .nlp import NlpOcp, SqpOptions, sqp_solve
from .schwarz import ConvergenceRecord, MaxOuterIterations, SubproblemFailure, make_partition

log = logging.getLogger(__name__)


@dataclass
class AdmmConfig:
    T: int = 1
    rho: float = 1.0
    max_iter: int = 500
    tol_pr: float = 1e-6
    tol_du: float = 1e-6
    sqp: SqpOptions = field(default_factory=SqpOptions)
    workers: int | None = None
    raise_on_max_iter: bool = True

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.max_iter < 1 or self.tol_pr <= 0 or self.tol_du <= 0:
            raise ValueError("max_iter and tolerances must be positive")


class AdmmSubOcp(NlpOcp):
    """Stages ``[n1, n2]`` of ``p`` with penalized seam copies at free ends."""

    def __init__(self, p: NlpOcp, n1: int, n2: int, rho: float, left=None, right=None):
        self.base, self.n1, self.n2, self.rho = p, n1, n2, float(rho)
        self.N, self.nx, self.nu = n2 - n1, p.nx, p.nu
        self.x0 = p.x0
        # left/right: target z - y for the penalized copy, or None
        self.left = None if left is None else np.asarray(left, float)
        self.right = None if right is None else np.asarray(right, float)
        self.free_initial = self.left is not None

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
        if self.right is None:
            return self.base.terminal_cost(x)
        d = x - self.right
        return 0.5 * self.rho * float(d @ d)

    def terminal_grad(self, x):
        if self.right is None:
            return self.base.terminal_grad(x)
        return self.rho * (x - self.right)

    def terminal_hess(self, x):
        if self.right is None:
            return self.base.terminal_hess(x)
        return self.rho * np.eye(self.nx)

    def initial_cost(self, x):
        d = x - self.left
        return 0.5 * self.rho * float(d @ d)

    def initial_grad(self, x):
        return self.rho * (x - self.left)

    def initial_hess(self, x):
        return self.rho * np.eye(self.nx)


def admm_solve(p: NlpOcp, cfg: AdmmConfig, start: Trajectory,
               reference: Trajectory | None = None) -> tuple[Trajectory, ConvergenceRecord]:
    """Consensus ADMM over seam states, warm-started from ``start``.

    The record's ``eps_pr``/``eps_du`` hold the seam primal residual
    ``max ||x_copy - z||`` and the dual residual ``rho ||z - z_prev||``.
    """
    if (start.N, start.nx, start.nu) != (p.N, p.nx, p.nu):
        raise StructureError("start trajectory does not match the problem dimensions")
    part = make_partition(p.N, cfg.T, tau=0)
    T, m, rho = part.T, part.m, cfg.rho
    z = {j: start.x[m[j]].copy() for j in range(1, T)}
    yR = {j: start.lam_at(m[j] - 1) / rho for j in range(1, T)}
    yL = {j: -start.lam_at(m[j] - 1) / rho for j in range(1, T)}
    local = [start.window(m[i], m[i + 1]) for i in range(T)]
    rec = ConvergenceRecord(note="eps_pr/eps_du are the ADMM seam primal/dual residuals")
    best, best_kkt = start, math.inf
    w = start
    t0 = time.perf_counter()
    pool = ThreadPoolExecutor(cfg.workers) if (cfg.workers or 1) > 1 and T > 1 else None

    def solve(i):
        left = z[i] - yR[i] if i > 0 else None
        right = z[i + 1] - yL[i + 1] if i < T - 1 else None
        sub = AdmmSubOcp(p, m[i], m[i + 1], rho, left, right)
        warm = local[i]
        if i == 0:
            warm = Trajectory(np.vstack([p.x0[None], warm.x[1:]]), warm.u, warm.lam)
        return sqp_solve(sub, warm, cfg.sqp)

    try:
        for it in range(cfg.max_iter):
            out = list(pool.map(solve, range(T))) if pool else [solve(i) for i in range(T)]
            for i, (_, rep) in enumerate(out):
                if not rep.converged:
                    raise SubproblemFailure(i, it, rep)
            local = [o[0] for o in out]
            r_pr = r_du = 0.0
            for j in range(1, T):
                xl, xr = local[j - 1].x[-1], local[j].x[0]
                z_old = z[j]
                z[j] = 0.5 * ((xl + yL[j]) + (xr + yR[j]))
                yL[j] = yL[j] + xl - z[j]
                yR[j] = yR[j] + xr - z[j]
                r_pr = max(r_pr, float(np.linalg.norm(xl - z[j])), float(np.linalg.norm(xr - z[j])))
                r_du = max(r_du, rho * float(np.linalg.norm(z[j] - z_old)))
            subs = [SubTrajectory(i, m[i], m[i + 1], local[i]) for i in range(T)]
            w = concatenate([restrict(s, part) for s in subs], p.N)
            stat, feas = kkt_residual(p, w)
            err = None if reference is None else norm_w(w - reference)
            rec.append(r_pr, r_du, stat, feas, err, time.perf_counter() - t0, [o[1].iterations for o in out])
            log.info("admm it=%d r_pr=%.3e r_du=%.3e kkt=%.3e", it, r_pr, r_du, max(stat, feas))
            if max(stat, feas) < best_kkt:
                best, best_kkt = w, max(stat, feas)
            if r_pr <= cfg.tol_pr and r_du <= cfg.tol_du:
                rec.converged = True
                return w, rec
    finally:
        if pool is not None:
            pool.shutdown()
    if cfg.raise_on_max_iter:
        raise MaxOuterIterations(best, rec)
    return w, rec
