"""Linear-quadratic OCP solver: Riccati recursion, dense KKT oracle, convexification.

Quadratic forms carry no 1/2 factor.  The stage objective is

    z_k^T H_k z_k + r_k^T x_k + s_k^T u_k + 2 l_k^T (D1_k x_k + D2_k u_k),

with ``z_k = (x_k, u_k)`` and ``H_k = [[Q_k, S_k^T], [S_k, R_k]]``; dynamics are
``x_{k+1} = A_k x_k + B_k u_k + v_k + C_k l_k`` and ``x_0 = x0``.  The data-coupling
blocks ``D1, D2, C, DN`` and direction ``l`` are only present for sensitivity
problems; otherwise they are treated as zero.

A problem may instead have a *free* initial state with cost
``x_0^T Qinit x_0 + rinit^T x_0``; its ``lambda_{-1}`` is then the gradient of
that cost at the optimum.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import StructureError, Trajectory


class IndefiniteW(np.linalg.LinAlgError):
    """``W_k = R_k + B_k^T K_{k+1} B_k`` is not positive definite."""

    def __init__(self, k: int):
        super().__init__(f"W_{k} is not positive definite (reduced Hessian assumption fails)")
        self.k = k


class SingularKkt(np.linalg.LinAlgError):
    pass


class ConvexifyBreakdown(np.linalg.LinAlgError):
    def __init__(self, k: int):
        super().__init__(f"convexification breaks down at stage {k}: R~_{k} is not positive "
                         "definite (beta too large)")
        self.k = k


def _arr(a, shape) -> np.ndarray:
    if a is None:
        return np.zeros(shape)
    a = np.asarray(a, dtype=float)
    if a.shape != shape:
        raise StructureError(f"expected shape {shape}, got {a.shape}")
    return a


@dataclass(frozen=True, eq=False)
class LqProblem:
    Q: np.ndarray   # (N, nx, nx)
    S: np.ndarray   # (N, nu, nx)
    R: np.ndarray   # (N, nu, nu)
    A: np.ndarray   # (N, nx, nx)
    B: np.ndarray   # (N, nx, nu)
    QN: np.ndarray  # (nx, nx)
    x0: np.ndarray  # (nx,)
    v: np.ndarray | None = None
    r: np.ndarray | None = None
    s: np.ndarray | None = None
    rN: np.ndarray | None = None
    D1: np.ndarray | None = None  # (N, nd, nx)
    D2: np.ndarray | None = None  # (N, nd, nu)
    C: np.ndarray | None = None   # (N, nx, nd)
    DN: np.ndarray | None = None  # (nd, nx)
    l: np.ndarray | None = None   # (N+1, nd): l_0 .. l_N
    Qinit: np.ndarray | None = None
    rinit: np.ndarray | None = None

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        if Q.ndim != 3:
            raise StructureError("Q must be a stack of N square matrices")
        N, nx = Q.shape[0], Q.shape[1]
        R = np.asarray(self.R, dtype=float)
        nu = R.shape[1]
        set_ = lambda name, val: object.__setattr__(self, name, val)  # noqa: E731
        set_("Q", _arr(Q, (N, nx, nx)))
        set_("S", _arr(self.S, (N, nu, nx)))
        set_("R", _arr(R, (N, nu, nu)))
        set_("A", _arr(self.A, (N, nx, nx)))
        set_("B", _arr(self.B, (N, nx, nu)))
        set_("QN", _arr(self.QN, (nx, nx)))
        set_("x0", _arr(self.x0, (nx,)))
        set_("v", _arr(self.v, (N, nx)))
        set_("r", _arr(self.r, (N, nx)))
        set_("s", _arr(self.s, (N, nu)))
        set_("rN", _arr(self.rN, (nx,)))
        if self.D1 is not None or self.C is not None or self.DN is not None:
            nd = self.nd_from_data()
            set_("D1", _arr(self.D1, (N, nd, nx)))
            set_("D2", _arr(self.D2, (N, nd, nu)))
            set_("C", _arr(self.C, (N, nx, nd)))
            set_("DN", _arr(self.DN, (nd, nx)))
            set_("l", _arr(self.l, (N + 1, nd)))
        if self.Qinit is not None:
            set_("Qinit", _arr(self.Qinit, (nx, nx)))
            set_("rinit", _arr(self.rinit, (nx,)))
        for M in (self.Q, self.R):
            bad = ~np.all(np.isclose(M, M.transpose(0, 2, 1), atol=1e-12, rtol=1e-10), axis=(1, 2))
            if bad.any():
                raise StructureError(f"H_{int(np.argmax(bad))} is not symmetric")

    def nd_from_data(self) -> int:
        for name, axis in (("D1", 1), ("D2", 1), ("C", 2), ("DN", 0), ("l", 1)):
            a = getattr(self, name)
            if a is not None:
                return np.asarray(a).shape[axis]
        raise StructureError("cannot infer data dimension")

    @property
    def N(self) -> int:
        return self.Q.shape[0]

    @property
    def nx(self) -> int:
        return self.Q.shape[1]

    @property
    def nu(self) -> int:
        return self.R.shape[1]

    @property
    def has_data(self) -> bool:
        return self.D1 is not None

    @property
    def free_initial(self) -> bool:
        return self.Qinit is not None

    def effective_linear(self):
        """Fold the data-coupling terms into ``(r, s, v, rN)``."""
        if not self.has_data:
            return self.r, self.s, self.v, self.rN
        lk, lN = self.l[:-1], self.l[-1]
        r = self.r + 2.0 * np.einsum("kdi,kd->ki", self.D1, lk)
        s = self.s + 2.0 * np.einsum("kdi,kd->ki", self.D2, lk)
        v = self.v + np.einsum("kid,kd->ki", self.C, lk)
        rN = self.rN + 2.0 * self.DN.T @ lN
        return r, s, v, rN

    def with_(self, **kw) -> "LqProblem":
        return replace(self, **kw)


@dataclass(frozen=True, eq=False)
class RiccatiFactors:
    W: np.ndarray      # (N, nu, nu)
    Wchol: np.ndarray  # lower Cholesky factors of W_k
    K: np.ndarray      # (N+1, nx, nx), K[N] = Q_N
    P: np.ndarray      # (N, nu, nx)
    E: np.ndarray      # (N, nx, nx)
    M: np.ndarray = field(repr=False, default=None)  # B^T K_{k+1} A + S, cached


def riccati_factor(p: LqProblem) -> RiccatiFactors:
    """Backward Riccati sweep producing ``W_k, K_k, P_k, E_k``.

    Raises:
        IndefiniteW: if some ``W_k`` fails a Cholesky factorization.
    """
    N, nx, nu = p.N, p.nx, p.nu
    K = np.empty((N + 1, nx, nx))
    W = np.empty((N, nu, nu))
    L = np.empty((N, nu, nu))
    P = np.empty((N, nu, nx))
    E = np.empty((N, nx, nx))
    M = np.empty((N, nu, nx))
    K[N] = p.QN
    for k in range(N - 1, -1, -1):
        Kn = K[k + 1]
        A, B = p.A[k], p.B[k]
        BtK = B.T @ Kn
        Wk = p.R[k] + BtK @ B
        Wk = 0.5 * (Wk + Wk.T)
        try:
            Lk = np.linalg.cholesky(Wk)
        except np.linalg.LinAlgError:
            raise IndefiniteW(k) from None
        Mk = BtK @ A + p.S[k]
        Pk = -sla.cho_solve((Lk, True), Mk, check_finite=False)
        Kk = p.Q[k] + A.T @ Kn @ A + Mk.T @ Pk
        K[k] = 0.5 * (Kk + Kk.T)
        W[k], L[k], P[k], M[k] = Wk, Lk, Pk, Mk
        E[k] = A + B @ Pk
    return RiccatiFactors(W=W, Wchol=L, K=K, P=P, E=E, M=M)


def lq_solve(p: LqProblem, f: RiccatiFactors | None = None) -> Trajectory:
    """Solve the LQ problem from its Riccati factors.

    The value function is ``V_k(x) = x^T K_k x + 2 kappa_k^T x + const``; the
    multipliers are recovered as ``lambda_{k-1} = -(2 K_k x_k + 2 kappa_k)``.
    """
    if f is None:
        f = riccati_factor(p)
    N, nx, nu = p.N, p.nx, p.nu
    r, s, v, rN = p.effective_linear()
    kappa = np.empty((N + 1, nx))
    d = np.empty((N, nu))
    kappa[N] = 0.5 * rN
    for k in range(N - 1, -1, -1):
        g = f.K[k + 1] @ v[k] + kappa[k + 1]
        dk = -sla.cho_solve((f.Wchol[k], True), p.B[k].T @ g + 0.5 * s[k], check_finite=False)
        d[k] = dk
        kappa[k] = f.M[k].T @ dk + 0.5 * r[k] + p.A[k].T @ g
    x = np.empty((N + 1, nx))
    u = np.empty((N, nu))
    if p.free_initial:
        H0 = f.K[0] + p.Qinit
        rhs = -(kappa[0] + 0.5 * p.rinit)
        try:
            x[0] = sla.solve(0.5 * (H0 + H0.T), rhs, assume_a="pos")
        except np.linalg.LinAlgError:
            raise IndefiniteW(-1) from None
    else:
        x[0] = p.x0
    for k in range(N):
        u[k] = f.P[k] @ x[k] + d[k]
        x[k + 1] = p.A[k] @ x[k] + p.B[k] @ u[k] + v[k]
    lam = -2.0 * (np.einsum("kij,kj->ki", f.K, x) + kappa)
    return Trajectory(x, u, lam)



def kkt_matrix(p: LqProblem):
    """Assemble the sparse saddle-point system for the stage-ordered unknowns.

    Unknown ordering per stage ``k``: ``lambda_{k-1}, x_k, u_k`` (no ``u`` at ``N``).
    Returns ``(K, rhs, index)`` where ``index`` maps blocks to slices.
    """
    N, nx, nu = p.N, p.nx, p.nu
    r, s, v, rN = p.effective_linear()
    stride = 2 * nx + nu
    n = N * stride + 2 * nx
    il = lambda k: (k + 1) * stride if k < N else N * stride  # noqa: E731  lambda_{k}
    ix = lambda k: k * stride + nx  # noqa: E731
    iu = lambda k: k * stride + 2 * nx  # noqa: E731
    rows, cols, vals = [], [], []
    rhs = np.zeros(n)

    def put(r0, c0, blk):
        blk = np.atleast_2d(blk)
        ri, ci = np.nonzero(np.ones_like(blk, dtype=bool))
        rows.append(ri + r0)
        cols.append(ci + c0)
        vals.append(blk[ri, ci])

    Inx = np.eye(nx)
    # row blocks share the column layout (symmetric system)
    # initial condition row (at lambda_{-1} position)
    if p.free_initial:
        # lambda_{-1} - (2 Qinit x0 + rinit) = 0
        put(0, 0, -Inx)
        put(0, ix(0), 2.0 * p.Qinit)
        rhs[0:nx] = -p.rinit
    else:
        put(0, ix(0), Inx)
        rhs[0:nx] = p.x0
    for k in range(N):
        A, B = p.A[k], p.B[k]
        # stationarity in x_k: 2Q x + 2S^T u + r + lam_{k-1} - A^T lam_k = 0
        rx = ix(k)
        put(rx, ix(k), 2.0 * p.Q[k])
        put(rx, iu(k), 2.0 * p.S[k].T)
        put(rx, k * stride, Inx)
        put(rx, il(k), -A.T)
        rhs[rx:rx + nx] = -r[k]
        ru = iu(k)
        put(ru, ix(k), 2.0 * p.S[k])
        put(ru, iu(k), 2.0 * p.R[k])
        put(ru, il(k), -B.T)
        rhs[ru:ru + nu] = -s[k]
        # dynamics row placed at lambda_k's position: -A x_k - B u_k + x_{k+1} = v_k
        rl = il(k)
        put(rl, ix(k), -A)
        put(rl, iu(k), -B)
        put(rl, ix(k + 1), Inx)
        rhs[rl:rl + nx] = v[k]
    rN_ = ix(N)
    put(rN_, ix(N), 2.0 * p.QN)
    put(rN_, il(N - 1), Inx)
    rhs[rN_:rN_ + nx] = -rN
    K = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n))
    return K, rhs, (stride, il, ix, iu)


def dense_kkt_solve(p: LqProblem) -> Trajectory:
    """Direct sparse-LU solve of the full KKT system (oracle for the Riccati path)."""
    K, rhs, (stride, il, ix, iu) = kkt_matrix(p)
    try:
        sol = spla.splu(K).solve(rhs)
    except RuntimeError as e:
        raise SingularKkt(str(e)) from None
    if not np.all(np.isfinite(sol)):
        raise SingularKkt("non-finite KKT solution")
    N, nx, nu = p.N, p.nx, p.nu
    x = np.array([sol[ix(k):ix(k) + nx] for k in range(N + 1)])
    u = np.array([sol[iu(k):iu(k) + nu] for k in range(N)]).reshape(N, nu)
    lam = np.array([sol[k * stride:k * stride + nx] for k in range(N + 1)])
    return Trajectory(x, u, lam)


def explicit_duals(p: LqProblem, f: RiccatiFactors, x: np.ndarray) -> np.ndarray:
    """Multipliers of a sensitivity LQP from the closed-form stagewise sums.

    Evaluates ``lambda_{k-1} = -2 K_k x_k - 2 kappa_k`` with
    ``kappa_k = -sum_{i>=k} M_i^{k T} l_i - sum_{i=k}^{N-1} V_i^{k T} C_i l_i``,
    ``M_i^k = -(D1_i + D2_i P_i) E_{i-1}..E_k`` (``M_N^k = -DN E_{N-1}..E_k``) and
    ``V_i^k = -K_{i+1} E_i..E_k``.  Cost is quadratic in ``N``; meant as an
    independent check of :func:`lq_solve`, which uses the backward recursion.
    """
    if not p.has_data:
        raise StructureError("explicit duals need a sensitivity LQP with data blocks")
    if np.any(p.r) or np.any(p.s) or np.any(p.v) or np.any(p.rN):
        raise StructureError("explicit duals assume no linear terms or drift")
    N, nx = p.N, p.nx
    lam = np.empty((N + 1, nx))
    for k in range(N + 1):
        kappa = np.zeros(nx)
        Phi = np.eye(nx)  # E_{i-1} .. E_k
        for i in range(k, N):
            M = -(p.D1[i] + p.D2[i] @ f.P[i]) @ Phi
            Phi = f.E[i] @ Phi
            V = -f.K[i + 1] @ Phi
            kappa -= M.T @ p.l[i] + V.T @ (p.C[i] @ p.l[i])
        kappa -= (-p.DN @ Phi).T @ p.l[N]
        lam[k] = -2.0 * (f.K[k] @ x[k] + kappa)
    return lam


@dataclass(frozen=True, eq=False)
class Convexified:
    problem: LqProblem
    Qbar: np.ndarray  # (N+1, nx, nx)


def convexify(p: LqProblem, beta: float | None = None) -> Convexified:
    """Backward convexification producing positive definite stage Hessians.

    The primal solution is unchanged and the multipliers shift as
    ``zeta = zeta_c - 2 Qbar_{k+1} p_{k+1}``.  With ``beta=None`` the shift is
    half the reduced-Hessian minimum eigenvalue on small instances, otherwise
    ``1e-2`` halved after each breakdown.

    Raises:
        ConvexifyBreakdown: if ``R~_k`` is not positive definite.
    """
    if beta is None:
        return _convexify_auto(p)
    if beta <= 0:
        raise ValueError("beta must be positive")
    N, nx, nu = p.N, p.nx, p.nu
    I = np.eye(nx)
    Qbar = np.empty((N + 1, nx, nx))
    Qt = np.empty((N, nx, nx))
    St = np.empty((N, nu, nx))
    Rt = np.empty((N, nu, nu))
    r, s = p.r.copy(), p.s.copy()
    D1t = D2t = None
    if p.has_data:
        D1t, D2t = p.D1.copy(), p.D2.copy()
    Qbar[N] = p.QN - beta * I
    for k in range(N - 1, -1, -1):
        A, B, Qb = p.A[k], p.B[k], Qbar[k + 1]
        Qhat = p.Q[k] + A.T @ Qb @ A
        St[k] = p.S[k] + B.T @ Qb @ A
        Rk = p.R[k] + B.T @ Qb @ B
        Rt[k] = 0.5 * (Rk + Rk.T)
        try:
            Lk = np.linalg.cholesky(Rt[k])
        except np.linalg.LinAlgError:
            raise ConvexifyBreakdown(k) from None
        Qk = St[k].T @ sla.cho_solve((Lk, True), St[k]) + beta * I
        Qt[k] = 0.5 * (Qk + Qk.T)
        Qb_k = Qhat - Qt[k]
        Qbar[k] = 0.5 * (Qb_k + Qb_k.T)
        # drift enters like C l: shift the linear terms by the cross block
        r[k] = r[k] + 2.0 * A.T @ Qb @ p.v[k]
        s[k] = s[k] + 2.0 * B.T @ Qb @ p.v[k]
        if p.has_data:
            D1t[k] = p.D1[k] + p.C[k].T @ Qb @ A
            D2t[k] = p.D2[k] + p.C[k].T @ Qb @ B
    q = replace(p, Q=Qt, S=St, R=Rt, QN=beta * I, r=r, s=s, D1=D1t, D2=D2t)
    return Convexified(q, Qbar)


_AUTO_BETA_MAX_VARS = 1500


def _convexify_auto(p: LqProblem) -> Convexified:
    if p.N * (p.nx + p.nu) + p.nx <= _AUTO_BETA_MAX_VARS:
        gamma = reduced_hessian_min_eig(p)
        if gamma <= 0:
            raise ConvexifyBreakdown(p.N)
        return convexify(p, 0.5 * gamma)
    beta = 1e-2
    for _ in range(40):
        try:
            return convexify(p, beta)
        except ConvexifyBreakdown:
            beta *= 0.5
    raise ConvexifyBreakdown(0)


def constraint_jacobian(p: LqProblem) -> np.ndarray:
    """Dense ``G`` with rows ``x_0`` and ``x_{k+1} - A_k x_k - B_k u_k``; columns ``z``."""
    N, nx, nu = p.N, p.nx, p.nu
    nz = N * (nx + nu) + nx
    G = np.zeros(((N + 1) * nx, nz))
    G[:nx, :nx] = np.eye(nx)
    for k in range(N):
        c = k * (nx + nu)
        rr = (k + 1) * nx
        G[rr:rr + nx, c:c + nx] = -p.A[k]
        G[rr:rr + nx, c + nx:c + nx + nu] = -p.B[k]
        G[rr:rr + nx, c + nx + nu:c + 2 * nx + nu] = np.eye(nx)
    return G


def hessian_blockdiag(p: LqProblem) -> np.ndarray:
    blocks = [np.block([[p.Q[k], p.S[k].T], [p.S[k], p.R[k]]]) for k in range(p.N)]
    blocks.append(p.QN)
    return sla.block_diag(*blocks)


def reduced_hessian_min_eig(p: LqProblem) -> float:
    """Smallest eigenvalue of ``Z^T H Z`` with ``Z`` an orthonormal null-space basis of ``G``."""
    Z = sla.null_space(constraint_jacobian(p))
    H = hessian_blockdiag(p)
    return float(np.linalg.eigvalsh(Z.T @ H @ Z)[0])


# ----------------------------------------------------------------------------- file format

def _mat(d, key, shape):
    if key not in d or d[key] is None:
        return np.zeros(shape)
    a = np.asarray(d[key], dtype=float).reshape(shape)
    return a


def lq_from_dict(d: dict) -> LqProblem:
    N, nx, nu = int(d["N"]), int(d["nx"]), int(d["nu"])
    stages = d.get("stages", [])
    if len(stages) != N:
        raise StructureError(f"expected {N} stages, found {len(stages)}")
    get = lambda key, shape: np.array([_mat(st, key, shape) for st in stages])  # noqa: E731
    return LqProblem(
        Q=get("Q", (nx, nx)), S=get("S", (nu, nx)), R=get("R", (nu, nu)),
        A=get("A", (nx, nx)), B=get("B", (nx, nu)), v=get("v", (nx,)),
        r=get("r", (nx,)), s=get("s", (nu,)),
        QN=_mat(d, "QN", (nx, nx)), rN=_mat(d, "rN", (nx,)), x0=_mat(d, "x0", (nx,)),
    )


def lq_to_dict(p: LqProblem) -> dict:
    stages = []
    for k in range(p.N):
        stages.append({key: getattr(p, key)[k].tolist()
                       for key in ("Q", "S", "R", "A", "B", "v", "r", "s")})
    return {"N": p.N, "nx": p.nx, "nu": p.nu, "stages": stages,
            "QN": p.QN.tolist(), "rN": p.rN.tolist(), "x0": p.x0.tolist()}


def load_lq(path) -> LqProblem:
    with open(Path(path)) as fh:
        return lq_from_dict(json.load(fh))


def save_lq(p: LqProblem, path) -> None:
    with open(Path(path), "w") as fh:
        json.dump(lq_to_dict(p), fh, indent=1)
