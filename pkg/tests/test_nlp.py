import numpy as np
import pytest

from instances import random_convex_lq, random_reh_lq
from schwarz_ocp.core import StructureError, Trajectory, kkt_residual, norm_w
from schwarz_ocp.lq import dense_kkt_solve
from schwarz_ocp.nlp import (EvaluationError, LqOcp, MaxIterations, SqpOptions, check_derivatives,
                             newton_lq, sqp_solve)
from schwarz_ocp.problems import quadrotor


@pytest.fixture(scope="module")
def quad200():
    p = quadrotor(N=200)
    t, rep = sqp_solve(p, Trajectory.zeros(200, 9, 4), SqpOptions(tol=1e-10))
    assert rep.converged
    return p, t, rep


@pytest.mark.parametrize("seed", range(5))
def test_lq_one_iteration(seed):
    rng = np.random.default_rng(seed)
    p = random_reh_lq(rng, 15, 3, 2, margin=0.2)
    start = Trajectory(rng.normal(size=(16, 3)) * 10, rng.normal(size=(15, 2)), rng.normal(size=(16, 3)))
    t, rep = sqp_solve(LqOcp(p), start)
    assert rep.converged and rep.iterations == 1
    d = dense_kkt_solve(p)
    assert norm_w(t - d) <= 1e-8 * (1 + norm_w(d))


def test_quadrotor_converges(quad200):
    p, t, rep = quad200
    stat, feas = kkt_residual(p, t)
    assert stat <= 1e-8 and feas <= 1e-8
    assert rep.stationarity <= 1e-10 and rep.feasibility <= 1e-10


def test_quadrotor_fd_derivatives_at_solution(quad200):
    p, t, _ = quad200
    assert check_derivatives(p, t, h=1e-5) <= 1e-5


def test_known_kkt_start(quad200):
    p, t, _ = quad200
    t2, rep = sqp_solve(p, t, SqpOptions(tol=1e-8))
    assert rep.iterations <= 1
    assert norm_w(t2 - t) <= 1e-10


def test_local_quadratic_convergence():
    p = quadrotor(N=200)
    _, rep = sqp_solve(p, Trajectory.zeros(200, 9, 4), SqpOptions(tol=1e-12))
    res = [max(s, f) for _, s, f, _, _ in rep.trace]
    tail = [r for r in res if r < 1e-2]
    ratios = [b / a**2 for a, b in zip(tail, tail[1:]) if a > 1e-11]
    assert ratios and max(ratios) < 1e4


def test_warm_start_proximity(quad200):
    p, t, _ = quad200
    rng = np.random.default_rng(0)
    for _ in range(3):
        pert = Trajectory(t.x + 1e-3 * rng.normal(size=t.x.shape), t.u + 1e-3 * rng.normal(size=t.u.shape),
                          t.lam + 1e-3 * rng.normal(size=t.lam.shape))
        t2, rep = sqp_solve(p, pert, SqpOptions(tol=1e-10))
        assert rep.converged
        assert norm_w(t2 - t) <= 1e-7


def test_merit_decreases_every_step():
    for p in (quadrotor(N=200), quadrotor(N=100, amplitude=(3.0, 3.0, 2.0))):
        _, rep = sqp_solve(p, Trajectory.zeros(p.N, 9, 4), SqpOptions(tol=1e-8))
        assert rep.converged and rep.merit_steps
        eps = np.finfo(float).eps
        for before, after in rep.merit_steps:
            assert after <= before + 10 * eps * (1 + abs(before))


def test_newton_lq_is_exact_for_quadratics():
    rng = np.random.default_rng(1)
    p = random_convex_lq(rng, 6)
    t = Trajectory.zeros(6, 3, 2)
    lq = newton_lq(LqOcp(p), t)
    np.testing.assert_allclose(lq.Q, p.Q)
    np.testing.assert_allclose(lq.R, p.R)
    np.testing.assert_allclose(lq.v, p.v)


def test_check_derivatives_lq():
    rng = np.random.default_rng(2)
    p = LqOcp(random_convex_lq(rng, 5))
    t = Trajectory(rng.normal(size=(6, 3)), rng.normal(size=(5, 2)), rng.normal(size=(6, 3)))
    assert check_derivatives(p, t) <= 1e-9
    with pytest.raises(ValueError):
        check_derivatives(p, t, h=0.0)


def test_max_iterations():
    p = quadrotor(N=50)
    _, rep = sqp_solve(p, Trajectory.zeros(50, 9, 4), SqpOptions(max_iter=1))
    assert not rep.converged and rep.iterations == 1
    with pytest.raises(MaxIterations):
        sqp_solve(p, Trajectory.zeros(50, 9, 4), SqpOptions(max_iter=1, raise_on_failure=True))


def test_nonfinite_start_raises():
    p = quadrotor(N=10)
    t = Trajectory.zeros(10, 9, 4)
    t.x[3, 0] = np.nan
    with pytest.raises(EvaluationError):
        sqp_solve(p, t)


def test_dimension_mismatch():
    with pytest.raises(StructureError):
        sqp_solve(quadrotor(N=10), Trajectory.zeros(11, 9, 4))


def test_option_validation():
    with pytest.raises(ValueError):
        SqpOptions(backtrack=1.5)
    with pytest.raises(ValueError):
        SqpOptions(tol=-1.0)


def test_trace_csv(tmp_path, quad200):
    _, _, rep = quad200
    path = tmp_path / "trace.csv"
    rep.write_trace(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iter,stationarity,feasibility,step_length,merit"
    assert len(lines) == len(rep.trace) + 1
