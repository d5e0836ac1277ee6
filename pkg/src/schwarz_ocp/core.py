"""Trajectory containers, stagewise norms, restriction operators and KKT residuals.

Stage conventions used throughout the package:

* ``x`` has shape ``(N+1, nx)`` and holds ``x_0 .. x_N``.
* ``u`` has shape ``(N, nu)`` and holds ``u_0 .. u_{N-1}``.
* ``lam`` has shape ``(N+1, nx)``; slot ``j`` stores ``lambda_{j-1}``, so slot 0 is
  the multiplier of the initial condition and slot ``N`` is ``lambda_{N-1}``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .nlp import NlpOcp
    from .schwarz import Partition


class StructureError(ValueError):
    """Inconsistent dimensions or index ranges."""


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Full primal-dual iterate ``w = (x, u, lambda)`` ordered by stage."""

    x: np.ndarray
    u: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        u = np.asarray(self.u, dtype=float)
        lam = np.atleast_2d(np.asarray(self.lam, dtype=float))
        if u.ndim == 1:
            u = u.reshape(len(u), -1) if len(u) else u.reshape(0, 0)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "lam", lam)
        N = x.shape[0] - 1
        if N < 1:
            raise StructureError("trajectory needs at least one stage")
        if u.ndim != 2 or u.shape[0] != N:
            raise StructureError(f"expected {N} controls, got shape {u.shape}")
        if lam.shape != x.shape:
            raise StructureError(f"lambda shape {lam.shape} does not match x shape {x.shape}")

    @property
    def N(self) -> int:
        return self.x.shape[0] - 1

    @property
    def nx(self) -> int:
        return self.x.shape[1]

    @property
    def nu(self) -> int:
        return self.u.shape[1]

    @classmethod
    def zeros(cls, N: int, nx: int, nu: int) -> "Trajectory":
        return cls(np.zeros((N + 1, nx)), np.zeros((N, nu)), np.zeros((N + 1, nx)))

    def copy(self) -> "Trajectory":
        return Trajectory(self.x.copy(), self.u.copy(), self.lam.copy())

    def lam_at(self, k: int) -> np.ndarray:
        """Return ``lambda_k`` for ``k`` in ``[-1, N-1]``."""
        if not -1 <= k <= self.N - 1:
            raise StructureError(f"lambda_{k} is outside [-1, {self.N - 1}]")
        return self.lam[k + 1]

    def window(self, n1: int, n2: int) -> "Trajectory":
        """Slice stages ``[n1, n2]`` as a trajectory of horizon ``n2 - n1``.

        The returned multipliers start at ``lambda_{n1-1}``, matching the payload
        layout ``(lambda_{n1-1}; w_{n1:n2-1}; x_{n2})`` of a subproblem variable.
        """
        if not 0 <= n1 < n2 <= self.N:
            raise StructureError(f"invalid window [{n1}, {n2}] for horizon {self.N}")
        return Trajectory(self.x[n1:n2 + 1].copy(), self.u[n1:n2].copy(),
                          self.lam[n1:n2 + 1].copy())

    def stage_norms(self) -> np.ndarray:
        """Stagewise norms ``||w_k||_w`` for ``k = -1 .. N`` (length ``N+2``)."""
        N = self.N
        out = np.zeros(N + 2)
        xn = np.linalg.norm(self.x, axis=1)
        un = np.linalg.norm(self.u, axis=1)
        ln = np.linalg.norm(self.lam, axis=1)
        out[0] = ln[0]
        out[1:N + 1] = np.maximum(np.maximum(xn[:N], un), ln[1:])
        out[N + 1] = xn[N]
        return out

    def __add__(self, other: "Trajectory") -> "Trajectory":
        _check_compatible(self, other)
        return Trajectory(self.x + other.x, self.u + other.u, self.lam + other.lam)

    def __sub__(self, other: "Trajectory") -> "Trajectory":
        _check_compatible(self, other)
        return Trajectory(self.x - other.x, self.u - other.u, self.lam - other.lam)

    def __mul__(self, c: float) -> "Trajectory":
        return Trajectory(c * self.x, c * self.u, c * self.lam)

    __rmul__ = __mul__


def _check_compatible(a: Trajectory, b: Trajectory) -> None:
    if a.x.shape != b.x.shape or a.u.shape != b.u.shape:
        raise StructureError(
            f"incompatible trajectories: {a.x.shape}/{a.u.shape} vs {b.x.shape}/{b.u.shape}")


@dataclass(frozen=True, eq=False)
class SubTrajectory:
    """Primal-dual solution of subproblem ``i`` over the expanded range ``[n1, n2]``.

    ``local`` is a trajectory of horizon ``n2 - n1`` whose slot 0 multiplier is
    ``lambda_{n1-1}`` in global indexing.
    """

    i: int
    n1: int
    n2: int
    local: Trajectory

    def __post_init__(self):
        if self.local.N != self.n2 - self.n1:
            raise StructureError(
                f"subtrajectory {self.i}: horizon {self.local.N} != {self.n2 - self.n1}")

    def x_at(self, k: int) -> np.ndarray:
        if not self.n1 <= k <= self.n2:
            raise StructureError(f"x_{k} not in subdomain [{self.n1}, {self.n2}]")
        return self.local.x[k - self.n1]

    def lam_at(self, k: int) -> np.ndarray:
        if not self.n1 - 1 <= k <= self.n2 - 1:
            raise StructureError(f"lambda_{k} not in subdomain [{self.n1 - 1}, {self.n2 - 1}]")
        return self.local.lam[k - self.n1 + 1]

    def norm(self) -> float:
        return norm_w(self.local)


@dataclass(frozen=True, eq=False)
class BoundaryData:
    """Parameter of subproblem ``i``: initial state and terminal primal-dual data.

    ``w_term`` is ``(x, u, lambda)`` at stage ``n_i^2``, or ``None`` when the
    subdomain reaches the end of the horizon.
    """

    i: int
    x_init: np.ndarray
    w_term: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    def norm(self) -> float:
        # an absent terminal block contributes nothing
        parts = [np.linalg.norm(self.x_init)]
        if self.w_term is not None:
            parts.extend(np.linalg.norm(b) for b in self.w_term)
        return float(max(parts))


def norm_w(t: Trajectory) -> float:
    """Stagewise max l2 norm: the max over stages of ``||x_k||``, ``||u_k||``, ``||lambda_k||``."""
    return float(t.stage_norms().max())


@dataclass(frozen=True, eq=False)
class StageSlice:
    """Restriction of a subproblem solution to its non-overlapping stages ``[k0, k1)``.

    ``lam`` holds ``lambda_k`` for ``k`` in ``[k0, k1)``, preceded by ``lambda_{-1}``
    when ``k0 == 0``.  ``x`` holds ``x_k`` for ``k`` in ``[k0, k1)``, followed by
    ``x_N`` for the last subdomain.
    """

    i: int
    k0: int
    k1: int
    x: np.ndarray
    u: np.ndarray
    lam: np.ndarray
    includes_first_dual: bool
    includes_last_state: bool


def restrict(sub: SubTrajectory, partition: "Partition") -> StageSlice:
    """Keep the non-overlapping part ``[m_i, m_{i+1})`` of a subproblem solution."""
    i = sub.i
    if not 0 <= i < partition.T:
        raise StructureError(f"subdomain {i} outside partition with T={partition.T}")
    if (sub.n1, sub.n2) != (partition.n1[i], partition.n2[i]):
        raise StructureError(
            f"subtrajectory range [{sub.n1}, {sub.n2}] does not match partition "
            f"[{partition.n1[i]}, {partition.n2[i]}]")
    m0, m1 = partition.m[i], partition.m[i + 1]
    first, last = i == 0, i == partition.T - 1
    a, b = m0 - sub.n1, m1 - sub.n1
    loc = sub.local
    x = loc.x[a:b + 1] if last else loc.x[a:b]
    u = loc.u[a:b]
    lam = loc.lam[a:b + 1] if first else loc.lam[a + 1:b + 1]
    return StageSlice(i, m0, m1, x.copy(), u.copy(), lam.copy(), first, last)


def concatenate(slices: Sequence[StageSlice], N: int) -> Trajectory:
    """Assemble restricted slices into a full trajectory.

    Raises ``StructureError`` unless every stage block is covered exactly once.
    """
    if not slices:
        raise StructureError("nothing to concatenate")
    nx = slices[0].x.shape[1]
    nu = slices[0].u.shape[1]
    x = np.empty((N + 1, nx))
    u = np.empty((N, nu))
    lam = np.empty((N + 1, nx))
    hits = np.zeros((3, N + 1), dtype=int)
    for s in slices:
        nxk = s.k1 - s.k0 + (1 if s.includes_last_state else 0)
        x[s.k0:s.k0 + nxk] = s.x
        hits[0, s.k0:s.k0 + nxk] += 1
        u[s.k0:s.k1] = s.u
        hits[1, s.k0:s.k1] += 1
        lo = s.k0 if s.includes_first_dual else s.k0 + 1
        lam[lo:s.k1 + 1] = s.lam
        hits[2, lo:s.k1 + 1] += 1
    if not (np.all(hits[0] == 1) and np.all(hits[1, :N] == 1) and np.all(hits[2] == 1)):
        raise StructureError("restricted slices do not tile the horizon exactly once")
    return Trajectory(x, u, lam)


def _block_max(rows: np.ndarray) -> float:
    if rows.size == 0:
        return 0.0
    return float(np.max(np.linalg.norm(rows.reshape(rows.shape[0], -1), axis=1)))


def kkt_rows(p: "NlpOcp", t: Trajectory):
    """Stationarity and feasibility rows of the first-order system at ``t``.

    Returns ``(sx, su, sN, feas, init)`` where ``sx``/``su`` have one row per stage
    ``k < N``, ``sN`` is the terminal state row, ``feas[k] = x_{k+1} - f_k(x_k, u_k)``
    and ``init`` is the initial-condition row.  For problems with a free initial
    state the initial row is ``lambda_{-1} - grad phi(x_0)`` and counts as
    stationarity.
    """
    if (t.N, t.nx, t.nu) != (p.N, p.nx, p.nu):
        raise StructureError(
            f"trajectory (N={t.N}, nx={t.nx}, nu={t.nu}) does not match problem "
            f"(N={p.N}, nx={p.nx}, nu={p.nu})")
    N = p.N
    ks = np.arange(N)
    X, U = t.x[:N], t.u
    gx, gu = p.stage_cost_grad(ks, X, U)
    A, B = p.dynamics_jac(ks, X, U)
    lam_prev, lam_k = t.lam[:N], t.lam[1:]
    sx = gx + lam_prev - np.einsum("kij,ki->kj", A, lam_k)
    su = gu - np.einsum("kij,ki->kj", B, lam_k)
    sN = p.terminal_grad(t.x[N]) + t.lam[N]
    feas = t.x[1:] - p.dynamics(ks, X, U)
    if p.free_initial:
        init = t.lam[0] - p.initial_grad(t.x[0])
    else:
        init = t.x[0] - p.x0
    return sx, su, sN, feas, init


def kkt_residual(p: "NlpOcp", t: Trajectory) -> tuple[float, float]:
    """Return ``(stationarity, feasibility)`` as max stage-block l2 norms."""
    sx, su, sN, feas, init = kkt_rows(p, t)
    stat = max(_block_max(sx), _block_max(su), float(np.linalg.norm(sN)))
    if p.free_initial:
        stat = max(stat, float(np.linalg.norm(init)))
        fea = _block_max(feas)
    else:
        fea = max(_block_max(feas), float(np.linalg.norm(init)))
    return stat, fea


def write_trajectory_csv(t: Trajectory, path) -> None:
    """One row per stage ``k = -1 .. N``; blocks undefined at a stage are left empty.

    Row ``k`` holds ``x_k``, ``u_k`` and ``lambda_k``: row ``-1`` carries only
    ``lambda_{-1}`` and row ``N`` only ``x_N``.
    """
    N, nx, nu = t.N, t.nx, t.nu
    head = ["stage"] + [f"x_{j}" for j in range(nx)] + [f"u_{j}" for j in range(nu)] + \
        [f"lambda_{j}" for j in range(nx)]
    fmt = lambda v: [repr(float(a)) for a in v]  # noqa: E731
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(head)
        w.writerow([-1] + [""] * (nx + nu) + fmt(t.lam[0]))
        for k in range(N):
            w.writerow([k] + fmt(t.x[k]) + fmt(t.u[k]) + fmt(t.lam[k + 1]))
        w.writerow([N] + fmt(t.x[N]) + [""] * (nu + nx))


def read_trajectory_csv(path) -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], rows[1:]
    nx = sum(h.startswith("x_") for h in head)
    nu = sum(h.startswith("u_") for h in head)
    N = len(body) - 2
    val = lambda cells: np.array([float(c) for c in cells])  # noqa: E731
    x = np.array([val(r[1:1 + nx]) for r in body[1:]])
    u = np.array([val(r[1 + nx:1 + nx + nu]) for r in body[1:N + 1]]).reshape(N, nu)
    lam = np.array([val(r[1 + nx + nu:]) for r in body[:N + 1]])
    return Trajectory(x, u, lam)
