"""Benchmark problems: quadrotor tracking and thin-plate temperature control.

Both are tracking problems with diagonal weights,

    g_k = 1/2 ||x_k - d_k||^2_Q + 1/2 ||u_k||^2_R,   g_N = 1/2 ||x_N - d_N||^2_{QN},

where the reference ``d_k`` doubles as the stage data vector for sensitivity
analysis (``nd = nx``).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .core import StructureError
from .nlp import NlpOcp


class TrigSingularity(ArithmeticError):
    """The pitch angle reached +-pi/2 where the attitude kinematics are singular."""


class _Tracking(NlpOcp):
    def __init__(self, N, q, r, qN, ref, x0):
        if N < 1:
            raise StructureError("horizon must be at least 1")
        self.N = int(N)
        self.q = np.asarray(q, float)
        self.r = np.asarray(r, float)
        self.qN = np.asarray(qN, float)
        self.nx, self.nu = len(self.q), len(self.r)
        self.nd = self.nx
        self.ref = np.asarray(ref, float)
        if self.ref.shape != (self.N + 1, self.nx):
            raise StructureError(f"reference must have shape {(self.N + 1, self.nx)}")
        self.x0 = np.asarray(x0, float)

    def stage_cost(self, ks, X, U):
        e = X - self.ref[ks]
        return 0.5 * (e * e) @ self.q + 0.5 * (U * U) @ self.r

    def stage_cost_grad(self, ks, X, U):
        return (X - self.ref[ks]) * self.q, U * self.r

    def stage_cost_hess(self, ks, X, U):
        n = len(ks)
        Gxx = np.zeros((n, self.nx, self.nx))
        Gxx[:, np.arange(self.nx), np.arange(self.nx)] = self.q
        Guu = np.zeros((n, self.nu, self.nu))
        Guu[:, np.arange(self.nu), np.arange(self.nu)] = self.r
        return Gxx, np.zeros((n, self.nu, self.nx)), Guu

    def terminal_cost(self, x):
        e = x - self.ref[-1]
        return float(0.5 * (e * e) @ self.qN)

    def terminal_grad(self, x):
        return (x - self.ref[-1]) * self.qN

    def terminal_hess(self, x):
        return np.diag(self.qN)

    def stage_data_hess(self, ks, X, U, L):
        n = len(ks)
        D = np.zeros((n, self.nx, self.nx))
        D[:, np.arange(self.nx), np.arange(self.nx)] = -self.q
        return D, np.zeros((n, self.nx, self.nu))

    def terminal_data_hess(self, x):
        return -np.diag(self.qN)

    def _copy(self, **kw):
        out = copy.copy(self)
        for k, v in kw.items():
            setattr(out, k, v)
        return out

    def with_initial_state(self, x0):
        return self._copy(x0=np.asarray(x0, float).copy())

    def with_terminal_shift(self, delta):
        ref = self.ref.copy()
        ref[-1] += delta
        return self._copy(ref=ref)

    def with_data(self, data):
        data = np.asarray(data, float)
        if data.shape != self.ref.shape:
            raise StructureError(f"data must have shape {self.ref.shape}")
        return self._copy(ref=data.copy())


# ----------------------------------------------------------------------------- quadrotor

@dataclass(frozen=True)
class QuadrotorParams:
    N: int = 2400
    dt: float = 0.005
    g: float = 9.8
    q: tuple = (1, 0, 1, 0, 1, 0, 1, 1, 1)
    r: tuple = (0.1, 0.1, 0.1, 0.1)
    # reference amplitudes and cycles per horizon for X, Y, Z
    amplitude: tuple = (1.0, 1.0, 0.5)
    cycles: tuple = (1.0, 1.0, 2.0)
    x0: tuple = (0.0,) * 9


# single-angle factors as (value, first, second derivative)
def _sin(a):
    s, c = np.sin(a), np.cos(a)
    return s, c, -s


def _cos(a):
    s, c = np.sin(a), np.cos(a)
    return c, -s, -c


def _one(a):
    return np.ones_like(a), np.zeros_like(a), np.zeros_like(a)


def _sec(a):
    s, c = np.sin(a), np.cos(a)
    return 1 / c, s / c**2, (1 + s * s) / c**3


def _tan(a):
    s, c = np.sin(a), np.cos(a)
    return s / c, 1 / c**2, 2 * s / c**3


# (state row, control index, factors in gamma, beta, alpha, sign)
_TERMS = (
    (1, 0, _cos, _sin, _cos, 1.0), (1, 0, _sin, _one, _sin, 1.0),
    (3, 0, _cos, _sin, _sin, 1.0), (3, 0, _sin, _one, _cos, -1.0),
    (5, 0, _cos, _cos, _one, 1.0),
    (6, 1, _cos, _sec, _one, 1.0), (6, 2, _sin, _sec, _one, 1.0),
    (7, 1, _sin, _one, _one, -1.0), (7, 2, _cos, _one, _one, 1.0),
    (8, 1, _cos, _tan, _one, 1.0), (8, 2, _sin, _tan, _one, 1.0),
)
_ANG = (6, 7, 8)


def _product(fs, angles):
    """Value, gradient (n,3) and Hessian (n,3,3) of a product of single-angle factors."""
    parts = [f(angles[:, j]) for j, f in enumerate(fs)]
    v = [p[0] for p in parts]
    val = v[0] * v[1] * v[2]
    n = angles.shape[0]
    grad = np.empty((n, 3))
    hess = np.empty((n, 3, 3))
    for i in range(3):
        o = [v[j] for j in range(3) if j != i]
        grad[:, i] = parts[i][1] * o[0] * o[1]
        hess[:, i, i] = parts[i][2] * o[0] * o[1]
        for j in range(i + 1, 3):
            m = 3 - i - j
            hess[:, i, j] = hess[:, j, i] = parts[i][1] * parts[j][1] * v[m]
    return val, grad, hess


class Quadrotor(_Tracking):
    """Quadrotor with state ``(X, Xd, Y, Yd, Z, Zd, gamma, beta, alpha)`` and control
    ``(a, wX, wY, wZ)``, discretized by explicit Euler."""

    def __init__(self, params: QuadrotorParams = QuadrotorParams()):
        self.params = params
        N, dt = params.N, params.dt
        ref = np.zeros((N + 1, 9))
        k = np.arange(N + 1)
        for pos, amp, cyc in zip((0, 2, 4), params.amplitude, params.cycles):
            ref[:, pos] = amp * np.sin(2 * np.pi * cyc * k / N)
        q = np.asarray(params.q, float)
        super().__init__(N, q, params.r, q / dt, ref, params.x0)
        self.dt, self.g = dt, params.g

    def _angles(self, X):
        ang = X[:, _ANG]
        if np.any(np.abs(np.cos(ang[:, 1])) < 1e-12):
            raise TrigSingularity("cos(beta) vanishes: attitude kinematics undefined")
        return ang

    def rhs(self, X, U):
        """Continuous-time right-hand side."""
        ang = self._angles(X)
        F = np.zeros_like(X)
        F[:, 0], F[:, 2], F[:, 4] = X[:, 1], X[:, 3], X[:, 5]
        F[:, 5] -= self.g
        F[:, 8] += U[:, 3]
        for row, c, fg, fb, fa, sgn in _TERMS:
            val = fg(ang[:, 0])[0] * fb(ang[:, 1])[0] * fa(ang[:, 2])[0]
            F[:, row] += sgn * U[:, c] * val
        return F

    def dynamics(self, ks, X, U):
        return X + self.dt * self.rhs(X, U)

    def dynamics_jac(self, ks, X, U):
        ang = self._angles(X)
        n = X.shape[0]
        A = np.zeros((n, 9, 9))
        B = np.zeros((n, 9, 4))
        A[:, (0, 2, 4), (1, 3, 5)] = 1.0
        B[:, 8, 3] = 1.0
        for row, c, fg, fb, fa, sgn in _TERMS:
            val, grad, _ = _product((fg, fb, fa), ang)
            A[:, row, 6:9] += sgn * U[:, c, None] * grad
            B[:, row, c] += sgn * val
        A *= self.dt
        A[:, np.arange(9), np.arange(9)] += 1.0
        return A, self.dt * B

    def dynamics_hess(self, ks, X, U, L):
        ang = self._angles(X)
        n = X.shape[0]
        Fxx = np.zeros((n, 9, 9))
        Fux = np.zeros((n, 4, 9))
        for row, c, fg, fb, fa, sgn in _TERMS:
            _, grad, hess = _product((fg, fb, fa), ang)
            w = sgn * L[:, row]
            Fxx[:, 6:9, 6:9] += (w * U[:, c])[:, None, None] * hess
            Fux[:, c, 6:9] += w[:, None] * grad
        return self.dt * Fxx, self.dt * Fux, np.zeros((n, 4, 4))

    def hover_control(self) -> np.ndarray:
        return np.array([self.g, 0.0, 0.0, 0.0])


def quadrotor(params: QuadrotorParams | None = None, **overrides) -> Quadrotor:
    """Build the quadrotor benchmark; keyword overrides replace ``QuadrotorParams`` fields."""
    params = params or QuadrotorParams()
    if overrides:
        params = QuadrotorParams(**{**params.__dict__, **overrides})
    return Quadrotor(params)


# ----------------------------------------------------------------------------- thin plate

@dataclass(frozen=True)
class ThinPlateParams:
    mesh: int = 10          # nodes per side, boundary included
    N: int = 8640           # 24 h at dt = 10 s
    dt: float = 10.0
    r: float = 0.1
    kappa: float = 400.0
    tz: float = 0.01
    hc: float = 1.0
    eps: float = 0.5
    sigma: float = 5.67e-8
    Tbar: float = 300.0
    amplitude: float = 10.0  # desired-temperature swing around Tbar
    period: float = 86400.0


class ThinPlate(_Tracking):
    """Explicit-Euler, 5-point-stencil discretization of the plate heat equation.

    The right-hand side is ``-Lap x + c1 (x - Tbar) + c2 (x^4 - Tbar^4) - u/(kappa t_z)``
    on interior nodes, with Dirichlet value ``Tbar`` on the boundary.
    """

    def __init__(self, params: ThinPlateParams = ThinPlateParams()):
        if params.mesh < 3:
            raise StructureError("mesh must be at least 3x3")
        self.params = params
        M = params.mesh
        m = M - 2
        h = 1.0 / (M - 1)
        self.h, self.dt, self.Tbar = h, params.dt, params.Tbar
        kt = params.kappa * params.tz
        self.c1 = 2 * params.hc / kt
        self.c2 = 2 * params.eps * params.sigma / kt
        self.cu = 1.0 / kt
        # Dirichlet Laplacian on interior nodes plus its boundary contribution
        I = np.eye(m)
        T1 = (np.diag(np.ones(m - 1), 1) + np.diag(np.ones(m - 1), -1) - 2 * I) / h**2
        self.lap = np.kron(T1, I) + np.kron(I, T1)
        self.lap_bc = -self.lap.sum(axis=1) * params.Tbar  # Lap(x) = lap @ x + lap_bc
        w = np.arange(1, M - 1) * h
        W1, W2 = np.meshgrid(w, w, indexing="ij")
        shape = (np.sin(np.pi * W1) * np.sin(np.pi * W2)).ravel()
        t = np.arange(params.N + 1) * params.dt
        ref = params.Tbar + params.amplitude * np.outer(np.sin(2 * np.pi * t / params.period), shape)
        area = self.dt * h * h
        n = m * m
        super().__init__(params.N, np.full(n, area), np.full(n, area * params.r), np.full(n, area),
                         ref, np.full(n, params.Tbar))

    def rhs(self, X, U):
        Tb = self.Tbar
        lap = X @ self.lap.T + self.lap_bc
        return -lap + self.c1 * (X - Tb) + self.c2 * (X**4 - Tb**4) - self.cu * U

    def dynamics(self, ks, X, U):
        return X + self.dt * self.rhs(X, U)

    def dynamics_jac(self, ks, X, U):
        n, nx = X.shape
        A = np.broadcast_to(np.eye(nx) + self.dt * (self.c1 * np.eye(nx) - self.lap), (n, nx, nx)).copy()
        A[:, np.arange(nx), np.arange(nx)] += self.dt * 4 * self.c2 * X**3
        B = np.broadcast_to(-self.dt * self.cu * np.eye(nx), (n, nx, nx)).copy()
        return A, B

    def dynamics_hess(self, ks, X, U, L):
        n, nx = X.shape
        Fxx = np.zeros((n, nx, nx))
        Fxx[:, np.arange(nx), np.arange(nx)] = self.dt * 12 * self.c2 * X**2 * L
        return Fxx, np.zeros((n, nx, nx)), np.zeros((n, nx, nx))


def thin_plate(params: ThinPlateParams | None = None, **overrides) -> ThinPlate:
    """Build the thin-plate benchmark; keyword overrides replace ``ThinPlateParams`` fields."""
    params = params or ThinPlateParams()
    if overrides:
        params = ThinPlateParams(**{**params.__dict__, **overrides})
    return ThinPlate(params)
