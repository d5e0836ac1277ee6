import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instances import scalar_lq
from schwarz_ocp.core import (BoundaryData, StructureError, SubTrajectory, Trajectory, concatenate,
                              kkt_residual, norm_w, read_trajectory_csv, restrict, write_trajectory_csv)
from schwarz_ocp.lq import lq_solve
from schwarz_ocp.nlp import LqOcp
from schwarz_ocp.problems import quadrotor
from schwarz_ocp.schwarz import make_partition


def rand_traj(rng, N=10, nx=3, nu=2):
    return Trajectory(rng.normal(size=(N + 1, nx)), rng.normal(size=(N, nu)), rng.normal(size=(N + 1, nx)))


def test_norm_zero():
    assert norm_w(Trajectory.zeros(4, 2, 1)) == 0.0


def test_norm_single_block():
    t = Trajectory.zeros(1, 2, 1)
    t.x[0] = (3.0, 4.0)
    assert norm_w(t) == pytest.approx(5.0)


def test_norm_matches_bruteforce():
    rng = np.random.default_rng(0)
    t = rand_traj(rng)
    blocks = list(t.x) + list(t.u) + list(t.lam)
    assert norm_w(t) == pytest.approx(max(np.linalg.norm(b) for b in blocks), rel=1e-15)


def test_stage_norm_layout():
    t = Trajectory.zeros(3, 2, 1)
    t.lam[0] = (1.0, 0.0)   # lambda_{-1}
    t.x[3] = (0.0, 2.0)     # x_N
    t.u[1] = (7.0,)
    d = t.stage_norms()
    assert d.tolist() == [1.0, 0.0, 7.0, 0.0, 2.0]


def test_trajectory_shape_checks():
    with pytest.raises(StructureError):
        Trajectory(np.zeros((3, 2)), np.zeros((3, 1)), np.zeros((3, 2)))
    with pytest.raises(StructureError):
        Trajectory(np.zeros((3, 2)), np.zeros((2, 1)), np.zeros((2, 2)))
    with pytest.raises(StructureError):
        Trajectory.zeros(3, 2, 1) + Trajectory.zeros(4, 2, 1)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.floats(-5, 5).filter(lambda c: c == 0 or abs(c) > 1e-100))
def test_norm_axioms(seed, c):
    rng = np.random.default_rng(seed)
    a, b = rand_traj(rng, 6), rand_traj(rng, 6)
    assert norm_w(a + b) <= norm_w(a) + norm_w(b) + 1e-12
    assert norm_w(c * a) == pytest.approx(abs(c) * norm_w(a), rel=1e-12, abs=1e-300)


def _subs_from(t, part):
    return [SubTrajectory(i, part.n1[i], part.n2[i], t.window(part.n1[i], part.n2[i])) for i in range(part.T)]


def test_restrict_single_domain_is_identity():
    rng = np.random.default_rng(1)
    t = rand_traj(rng)
    part = make_partition(10, 1, tau=3)
    s = restrict(_subs_from(t, part)[0], part)
    back = concatenate([s], 10)
    assert norm_w(back - t) == 0.0


def test_restrict_interior_and_first():
    rng = np.random.default_rng(2)
    t = rand_traj(rng)
    part = make_partition(10, breakpoints=(0, 4, 7, 10), tau=2)
    subs = _subs_from(t, part)
    s1 = restrict(subs[1], part)
    assert (s1.k0, s1.k1) == (4, 7)
    np.testing.assert_array_equal(s1.x, t.x[4:7])
    np.testing.assert_array_equal(s1.u, t.u[4:7])
    np.testing.assert_array_equal(s1.lam, t.lam[5:8])  # lambda_4 .. lambda_6
    s0 = restrict(subs[0], part)
    assert s0.includes_first_dual
    np.testing.assert_array_equal(s0.lam[0], t.lam_at(-1))
    s2 = restrict(subs[2], part)
    np.testing.assert_array_equal(s2.x[-1], t.x[10])


def test_restrict_mismatch():
    rng = np.random.default_rng(3)
    t = rand_traj(rng)
    part = make_partition(10, 3, tau=2)
    bad = SubTrajectory(1, 0, 10, t)
    with pytest.raises(StructureError):
        restrict(bad, part)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 40), st.data())
def test_concatenate_reconstructs(N, data):
    T = data.draw(st.integers(1, N))
    tau = data.draw(st.integers(0, N))
    rng = np.random.default_rng(N * 1000 + T)
    t = rand_traj(rng, N, 2, 1)
    part = make_partition(N, T, tau=tau)
    back = concatenate([restrict(s, part) for s in _subs_from(t, part)], N)
    assert norm_w(back - t) == 0.0


def test_concatenate_detects_gap():
    rng = np.random.default_rng(4)
    t = rand_traj(rng)
    part = make_partition(10, 3, tau=1)
    slices = [restrict(s, part) for s in _subs_from(t, part)]
    with pytest.raises(StructureError):
        concatenate(slices[:2], 10)


def test_boundary_norm_ignores_absent_terminal():
    b = BoundaryData(2, np.array([3.0, 4.0]))
    assert b.norm() == 5.0
    b = BoundaryData(0, np.zeros(2), (np.zeros(2), np.array([6.0]), np.zeros(2)))
    assert b.norm() == 6.0


def test_kkt_residual_scalar_solution():
    p = scalar_lq()
    t = lq_solve(p)
    stat, feas = kkt_residual(LqOcp(p), t)
    assert stat <= 1e-12 and feas <= 1e-12


def test_kkt_residual_feasible_nonstationary():
    p = quadrotor(N=30)
    rng = np.random.default_rng(5)
    U = rng.normal(size=(30, 4))
    X = p.rollout(p.x0, U)
    stat, feas = kkt_residual(p, Trajectory(X, U, np.zeros((31, 9))))
    assert feas == 0.0
    assert stat > 0.0


def test_kkt_residual_dynamics_rows_match_rollout():
    p = quadrotor(N=20)
    t = Trajectory.zeros(20, 9, 4)
    _, feas = kkt_residual(p, t)
    direct = max(np.linalg.norm(t.x[k + 1] - p.dynamics(np.array([k]), t.x[k:k + 1], t.u[k:k + 1])[0])
                 for k in range(20))
    assert feas == pytest.approx(direct, rel=1e-14)
    assert feas == pytest.approx(p.dt * p.g)


def test_kkt_residual_dimension_mismatch():
    with pytest.raises(StructureError):
        kkt_residual(quadrotor(N=5), Trajectory.zeros(6, 9, 4))


def test_trajectory_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    t = rand_traj(rng, 5, 2, 1)
    path = tmp_path / "t.csv"
    write_trajectory_csv(t, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "stage,x_0,x_1,u_0,lambda_0,lambda_1"
    assert lines[1].startswith("-1,,,,")
    assert lines[-1].startswith("5,") and lines[-1].endswith(",,,")
    back = read_trajectory_csv(path)
    assert norm_w(back - t) == 0.0
