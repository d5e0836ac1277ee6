"""Nonlinear OCP interface and an equality-constrained SQP solver.

Problems expose batched callbacks: every stage evaluator receives an index
array ``ks`` and stacked states ``X`` (n, nx) and controls ``U`` (n, nu).  All
derivatives returned by callbacks are plain derivatives (no 1/2 scaling); the
solver halves second derivatives when it builds the Riccati-form Newton step.

An optional stage data vector ``d_k`` (``nd`` entries per stage, ``k = 0..N``)
parameterizes the problem for sensitivity analysis.  Problems with ``nd = 0``
need not implement the data callbacks.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .core import StructureError, Trajectory, kkt_residual
from .lq import IndefiniteW, LqProblem, lq_solve, riccati_factor

log = logging.getLogger(__name__)


class EvaluationError(ArithmeticError):
    """A problem callback produced a non-finite value."""


class MaxIterations(RuntimeError):
    pass


class LineSearchFailure(RuntimeError):
    pass


class NlpOcp:
    """Base class for callback-defined OCPs.

    Subclasses set ``N``, ``nx``, ``nu``, ``x0`` and implement the stage,
    dynamics and terminal callbacks.  ``free_initial`` problems replace the
    constraint ``x_0 = x0`` by an initial cost ``phi(x_0)``.
    """

    N: int
    nx: int
    nu: int
    x0: np.ndarray
    free_initial: bool = False
    nd: int = 0

    # stage cost g_k
    def stage_cost(self, ks, X, U) -> np.ndarray:
        raise NotImplementedError

    def stage_cost_grad(self, ks, X, U):
        raise NotImplementedError

    def stage_cost_hess(self, ks, X, U):
        """Return ``(Gxx, Gux, Guu)`` with shapes (n,nx,nx), (n,nu,nx), (n,nu,nu)."""
        raise NotImplementedError

    # dynamics f_k
    def dynamics(self, ks, X, U) -> np.ndarray:
        raise NotImplementedError

    def dynamics_jac(self, ks, X, U):
        raise NotImplementedError

    def dynamics_hess(self, ks, X, U, L):
        """Second derivatives of ``sum_i L_i f_i``: ``(Fxx, Fux, Fuu)``."""
        raise NotImplementedError

    # terminal cost g_N
    def terminal_cost(self, x) -> float:
        raise NotImplementedError

    def terminal_grad(self, x) -> np.ndarray:
        raise NotImplementedError

    def terminal_hess(self, x) -> np.ndarray:
        raise NotImplementedError

    # initial cost, only used when free_initial is set
    def initial_cost(self, x) -> float:
        return 0.0

    def initial_grad(self, x) -> np.ndarray:
        return np.zeros(self.nx)

    def initial_hess(self, x) -> np.ndarray:
        return np.zeros((self.nx, self.nx))

    # data derivatives for sensitivity analysis
    def stage_data_hess(self, ks, X, U, L):
        """Mixed derivatives of ``g_k - L.f_k`` w.r.t. ``(d_k, x_k)`` and ``(d_k, u_k)``."""
        n = len(ks)
        return np.zeros((n, self.nd, self.nx)), np.zeros((n, self.nd, self.nu))

    def dynamics_data_jac(self, ks, X, U):
        return np.zeros((len(ks), self.nx, self.nd))

    def terminal_data_hess(self, x):
        return np.zeros((self.nd, self.nx))

    # perturbation helpers
    def with_initial_state(self, x0) -> "NlpOcp":
        raise NotImplementedError

    def with_terminal_shift(self, delta) -> "NlpOcp":
        raise NotImplementedError

    def with_data(self, data) -> "NlpOcp":
        raise NotImplementedError

    # convenience
    def objective(self, t: Trajectory) -> float:
        ks = np.arange(self.N)
        val = float(np.sum(self.stage_cost(ks, t.x[:-1], t.u))) + float(self.terminal_cost(t.x[-1]))
        if self.free_initial:
            val += float(self.initial_cost(t.x[0]))
        return val

    def rollout(self, x0, U) -> np.ndarray:
        X = np.empty((self.N + 1, self.nx))
        X[0] = x0
        for k in range(self.N):
            X[k + 1] = self.dynamics(np.array([k]), X[k:k + 1], U[k:k + 1])[0]
        return X


class LqOcp(NlpOcp):
    """An :class:`LqProblem` seen as a nonlinear OCP.

    The stage data ``d_k`` (``nd = nx``) enters additively: the stage and
    terminal costs gain ``d_k^T x_k`` and the dynamics gain ``d_k``.
    """

    def __init__(self, p: LqProblem, data=None):
        if p.has_data:
            raise StructureError("wrap the base LQ problem, not a sensitivity LQP")
        self.p = p
        self.N, self.nx, self.nu = p.N, p.nx, p.nu
        self.x0 = p.x0
        self.free_initial = p.free_initial
        self.nd = p.nx
        self.data = np.zeros((p.N + 1, p.nx)) if data is None else np.asarray(data, float)
        if self.data.shape != (p.N + 1, p.nx):
            raise StructureError(f"data must have shape {(p.N + 1, p.nx)}")

    def stage_cost(self, ks, X, U):
        p = self.p
        Q, S, R = p.Q[ks], p.S[ks], p.R[ks]
        return (np.einsum("ki,kij,kj->k", X, Q, X) + 2 * np.einsum("ki,kij,kj->k", U, S, X)
                + np.einsum("ki,kij,kj->k", U, R, U) + np.einsum("ki,ki->k", p.r[ks] + self.data[ks], X)
                + np.einsum("ki,ki->k", p.s[ks], U))

    def stage_cost_grad(self, ks, X, U):
        p = self.p
        gx = 2 * (np.einsum("kij,kj->ki", p.Q[ks], X) + np.einsum("kji,kj->ki", p.S[ks], U)) \
            + p.r[ks] + self.data[ks]
        gu = 2 * (np.einsum("kij,kj->ki", p.S[ks], X) + np.einsum("kij,kj->ki", p.R[ks], U)) + p.s[ks]
        return gx, gu

    def stage_cost_hess(self, ks, X, U):
        p = self.p
        return 2 * p.Q[ks], 2 * p.S[ks], 2 * p.R[ks]

    def dynamics(self, ks, X, U):
        p = self.p
        return (np.einsum("kij,kj->ki", p.A[ks], X) + np.einsum("kij,kj->ki", p.B[ks], U)
                + p.v[ks] + self.data[ks])

    def dynamics_jac(self, ks, X, U):
        return self.p.A[ks], self.p.B[ks]

    def dynamics_hess(self, ks, X, U, L):
        n = len(ks)
        return np.zeros((n, self.nx, self.nx)), np.zeros((n, self.nu, self.nx)), np.zeros((n, self.nu, self.nu))

    def terminal_cost(self, x):
        p = self.p
        return float(x @ p.QN @ x + (p.rN + self.data[-1]) @ x)

    def terminal_grad(self, x):
        p = self.p
        return 2 * p.QN @ x + p.rN + self.data[-1]

    def terminal_hess(self, x):
        return 2 * self.p.QN

    def initial_cost(self, x):
        if not self.free_initial:
            return 0.0
        return float(x @ self.p.Qinit @ x + self.p.rinit @ x)

    def initial_grad(self, x):
        if not self.free_initial:
            return np.zeros(self.nx)
        return 2 * self.p.Qinit @ x + self.p.rinit

    def initial_hess(self, x):
        if not self.free_initial:
            return np.zeros((self.nx, self.nx))
        return 2 * self.p.Qinit

    def stage_data_hess(self, ks, X, U, L):
        n = len(ks)
        return np.broadcast_to(np.eye(self.nx), (n, self.nx, self.nx)).copy(), np.zeros((n, self.nx, self.nu))

    def dynamics_data_jac(self, ks, X, U):
        return np.broadcast_to(np.eye(self.nx), (len(ks), self.nx, self.nx)).copy()

    def terminal_data_hess(self, x):
        return np.eye(self.nx)

    def with_initial_state(self, x0):
        return LqOcp(self.p.with_(x0=np.asarray(x0, float)), self.data)

    def with_terminal_shift(self, delta):
        # moves the minimizer of the terminal quadratic by delta
        return LqOcp(self.p.with_(rN=self.p.rN - 2 * self.p.QN @ np.asarray(delta, float)), self.data)

    def with_data(self, data):
        return LqOcp(self.p, data)

    def as_lq(self) -> LqProblem:
        """The wrapped problem with the stage data folded into its linear terms."""
        d = self.data
        if not np.any(d):
            return self.p
        return self.p.with_(r=self.p.r + d[:-1], v=self.p.v + d[:-1], rN=self.p.rN + d[-1])


# ----------------------------------------------------------------------------- SQP

@dataclass(frozen=True)
class SqpOptions:
    tol: float = 1e-8
    max_iter: int = 100
    reg_init: float = 1e-8
    reg_growth: float = 10.0
    reg_max: float = 1e10
    armijo: float = 1e-4
    backtrack: float = 0.5
    min_step: float = 1e-10
    merit_growth: float = 10.0
    raise_on_failure: bool = False

    def __post_init__(self):
        for name in ("tol", "reg_init", "reg_growth", "reg_max", "armijo", "min_step", "merit_growth"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack must lie in (0, 1)")
        if self.max_iter < 0:
            raise ValueError("max_iter must be nonnegative")


@dataclass
class SqpReport:
    converged: bool
    iterations: int
    stationarity: float
    feasibility: float
    reg_events: int = 0
    message: str = ""
    trace: list = field(default_factory=list)  # (iter, stat, feas, step, merit)
    wall: list = field(default_factory=list)   # seconds elapsed at each trace row
    merit_steps: list = field(default_factory=list)  # (before, after) merit of each accepted step

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "stationarity", "feasibility", "step_length", "merit"])
            for row in self.trace:
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def _finite(*arrs):
    for a in arrs:
        if not np.all(np.isfinite(a)):
            raise EvaluationError("callback returned non-finite values")


def newton_lq(p: NlpOcp, t: Trajectory, sigma: float = 0.0) -> LqProblem:
    """Riccati-form Newton step subproblem at ``t``; its solution is ``(dx, du, lambda_new)``."""
    N = p.N
    ks = np.arange(N)
    X, U = t.x[:N], t.u
    Gxx, Gux, Guu = p.stage_cost_hess(ks, X, U)
    Fxx, Fux, Fuu = p.dynamics_hess(ks, X, U, t.lam[1:])
    A, B = p.dynamics_jac(ks, X, U)
    gx, gu = p.stage_cost_grad(ks, X, U)
    f = p.dynamics(ks, X, U)
    _finite(Gxx, Gux, Guu, Fxx, Fux, Fuu, A, B, gx, gu, f)
    Q = 0.5 * (Gxx - Fxx)
    Q = 0.5 * (Q + Q.transpose(0, 2, 1)) + sigma * np.eye(p.nx)
    R = 0.5 * (Guu - Fuu)
    R = 0.5 * (R + R.transpose(0, 2, 1)) + sigma * np.eye(p.nu)
    S = 0.5 * (Gux - Fux)
    QN = 0.5 * p.terminal_hess(t.x[N])
    QN = 0.5 * (QN + QN.T) + sigma * np.eye(p.nx)
    kw = {}
    if p.free_initial:
        Qi = 0.5 * p.initial_hess(t.x[0])
        kw = dict(Qinit=0.5 * (Qi + Qi.T) + sigma * np.eye(p.nx), rinit=p.initial_grad(t.x[0]))
        x0 = np.zeros(p.nx)
    else:
        x0 = p.x0 - t.x[0]
    return LqProblem(Q=Q, S=S, R=R, A=A, B=B, QN=QN, x0=x0, v=f - t.x[1:], r=gx, s=gu,
                     rN=p.terminal_grad(t.x[N]), **kw)


def _constraint_l1(p: NlpOcp, t: Trajectory) -> float:
    ks = np.arange(p.N)
    c = np.abs(t.x[1:] - p.dynamics(ks, t.x[:-1], t.u)).sum()
    if not p.free_initial:
        c += np.abs(t.x[0] - p.x0).sum()
    return float(c)


def _objective_grad_dot(p: NlpOcp, t: Trajectory, step: Trajectory) -> float:
    ks = np.arange(p.N)
    gx, gu = p.stage_cost_grad(ks, t.x[:-1], t.u)
    val = np.sum(gx * step.x[:-1]) + np.sum(gu * step.u) + p.terminal_grad(t.x[-1]) @ step.x[-1]
    if p.free_initial:
        val += p.initial_grad(t.x[0]) @ step.x[0]
    return float(val)


def sqp_solve(p: NlpOcp, start: Trajectory, opts: SqpOptions | None = None) -> tuple[Trajectory, SqpReport]:
    """Solve ``p`` by exact-Hessian SQP with Riccati Newton steps and an l1-merit line search.

    Args:
        p: problem to solve.
        start: initial primal-dual guess (warm start).
        opts: solver options.

    Returns:
        The final iterate and a report.  With ``opts.raise_on_failure`` set, a
        :class:`MaxIterations` or :class:`LineSearchFailure` is raised instead
        of returning an unconverged report.
    """
    opts = opts or SqpOptions()
    if (start.N, start.nx, start.nu) != (p.N, p.nx, p.nu):
        raise StructureError("start trajectory does not match the problem dimensions")
    t = start.copy()
    nu_pen = 0.0
    reg_events = 0
    trace, wall, steps = [], [], []
    eps = np.finfo(float).eps
    t_start = time.perf_counter()

    def merit(tt, nu_):
        return p.objective(tt) + nu_ * _constraint_l1(p, tt)

    it = 0
    while True:
        stat, feas = kkt_residual(p, t)
        _finite(stat, feas)
        if stat <= opts.tol and feas <= opts.tol:
            trace.append((it, stat, feas, 0.0, merit(t, nu_pen)))
            wall.append(time.perf_counter() - t_start)
            return t, SqpReport(True, it, stat, feas, reg_events, "converged", trace, wall, steps)
        if it >= opts.max_iter:
            msg = f"maximum iterations ({opts.max_iter}) reached"
            rep = SqpReport(False, it, stat, feas, reg_events, msg, trace, wall, steps)
            if opts.raise_on_failure:
                raise MaxIterations(msg)
            return t, rep

        # Newton step, regularizing the Hessian until the Riccati pivots are PD
        sigma = 0.0
        while True:
            lq = newton_lq(p, t, sigma)
            try:
                sol = lq_solve(lq, riccati_factor(lq))
                break
            except IndefiniteW:
                reg_events += 1
                sigma = opts.reg_init if sigma == 0.0 else sigma * opts.reg_growth
                if sigma > opts.reg_max:
                    raise LineSearchFailure("Hessian regularization exceeded its upper bound") from None
        step = Trajectory(sol.x, sol.u, sol.lam - t.lam)

        # l1 merit: penalty starts from the multiplier size and grows until the
        # directional derivative is at most -nu*||c||_1 / 2
        c1 = _constraint_l1(p, t)
        gdot = _objective_grad_dot(p, t, step)
        lam_inf = float(np.max(np.abs(sol.lam)))
        if nu_pen == 0.0:
            nu_pen = 1.1 * lam_inf + 1e-8
        if c1 > 0:
            need = max(lam_inf, 2.0 * gdot / c1)
            if nu_pen < need:
                nu_pen = max(nu_pen * opts.merit_growth, 1.1 * need)
        deriv = gdot - nu_pen * c1
        phi0 = merit(t, nu_pen)
        alpha = 1.0
        while True:
            trial = t + alpha * step
            phi = merit(trial, nu_pen)
            if np.isfinite(phi) and phi <= phi0 + opts.armijo * alpha * min(deriv, 0.0) \
                    + 10 * eps * (1 + abs(phi0)):
                break
            alpha *= opts.backtrack
            if alpha < opts.min_step:
                msg = f"line search failed at iteration {it}"
                rep = SqpReport(False, it, stat, feas, reg_events, msg, trace, wall, steps)
                if opts.raise_on_failure:
                    raise LineSearchFailure(msg)
                return t, rep
        trace.append((it, stat, feas, alpha, phi0))
        steps.append((phi0, phi))
        wall.append(time.perf_counter() - t_start)
        log.debug("sqp it=%d stat=%.3e feas=%.3e alpha=%.3g", it, stat, feas, alpha)
        t = trial
        it += 1


# ----------------------------------------------------------------------------- derivative check

def _rel(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def check_derivatives(p: NlpOcp, at: Trajectory, h: float = 1e-6, stages=None) -> float:
    """Max relative discrepancy between callback derivatives and central differences.

    Checks cost gradients, dynamics Jacobians, Lagrangian Hessian blocks (with the
    multipliers stored in ``at``) and the terminal cost derivatives.

    Args:
        p: problem.
        at: evaluation point; its multipliers weight the dynamics Hessian.
        h: difference step.
        stages: optional subset of stage indices to check (default all).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    ks = np.arange(p.N) if stages is None else np.asarray(stages, dtype=int)
    X, U, L = at.x[ks], at.u[ks], at.lam[ks + 1]
    nx, nu = p.nx, p.nu
    n = len(ks)
    worst = 0.0

    gx, gu = p.stage_cost_grad(ks, X, U)
    A, B = p.dynamics_jac(ks, X, U)
    Gxx, Gux, Guu = p.stage_cost_hess(ks, X, U)
    Fxx, Fux, Fuu = p.dynamics_hess(ks, X, U, L)
    Hxx, Hux, Huu = Gxx - Fxx, Gux - Fux, Guu - Fuu

    def lag_grad(Xp, Up):
        gx_, gu_ = p.stage_cost_grad(ks, Xp, Up)
        A_, B_ = p.dynamics_jac(ks, Xp, Up)
        return gx_ - np.einsum("kij,ki->kj", A_, L), gu_ - np.einsum("kij,ki->kj", B_, L)

    fd_A = np.empty((n, nx, nx))
    fd_gx = np.empty((n, nx))
    fd_Hxx = np.empty((n, nx, nx))
    fd_Hxu = np.empty((n, nu, nx))  # d(grad_u L)/dx
    for j in range(nx):
        e = np.zeros(nx)
        e[j] = h
        fp, fm = p.dynamics(ks, X + e, U), p.dynamics(ks, X - e, U)
        fd_A[:, :, j] = (fp - fm) / (2 * h)
        fd_gx[:, j] = (p.stage_cost(ks, X + e, U) - p.stage_cost(ks, X - e, U)) / (2 * h)
        (lxp, lup), (lxm, lum) = lag_grad(X + e, U), lag_grad(X - e, U)
        fd_Hxx[:, :, j] = (lxp - lxm) / (2 * h)
        fd_Hxu[:, :, j] = (lup - lum) / (2 * h)
    fd_B = np.empty((n, nx, nu))
    fd_gu = np.empty((n, nu))
    fd_Huu = np.empty((n, nu, nu))
    for j in range(nu):
        e = np.zeros(nu)
        e[j] = h
        fd_B[:, :, j] = (p.dynamics(ks, X, U + e) - p.dynamics(ks, X, U - e)) / (2 * h)
        fd_gu[:, j] = (p.stage_cost(ks, X, U + e) - p.stage_cost(ks, X, U - e)) / (2 * h)
        (_, lup), (_, lum) = lag_grad(X, U + e), lag_grad(X, U - e)
        fd_Huu[:, :, j] = (lup - lum) / (2 * h)
    for a, b in ((A, fd_A), (B, fd_B), (gx, fd_gx), (gu, fd_gu), (Hxx, fd_Hxx), (Hux, fd_Hxu),
                 (Huu, fd_Huu)):
        worst = max(worst, _rel(a, b))

    xN = at.x[-1]
    gN = p.terminal_grad(xN)
    HN = p.terminal_hess(xN)
    fd_g = np.empty(nx)
    fd_H = np.empty((nx, nx))
    for j in range(nx):
        e = np.zeros(nx)
        e[j] = h
        fd_g[j] = (p.terminal_cost(xN + e) - p.terminal_cost(xN - e)) / (2 * h)
        fd_H[:, j] = (p.terminal_grad(xN + e) - p.terminal_grad(xN - e)) / (2 * h)
    worst = max(worst, _rel(gN, fd_g), _rel(HN, fd_H))
    return worst
