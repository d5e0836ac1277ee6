import numpy as np
import pytest

from schwarz_ocp.core import StructureError, Trajectory
from schwarz_ocp.nlp import check_derivatives
from schwarz_ocp.problems import QuadrotorParams, TrigSingularity, quadrotor, thin_plate


def _random_point(rng, p, scale_x=0.5, center=0.0):
    return Trajectory(center + scale_x * rng.normal(size=(p.N + 1, p.nx)), rng.normal(size=(p.N, p.nu)),
                      rng.normal(size=(p.N + 1, p.nx)))


def test_quadrotor_defaults():
    p = quadrotor()
    assert (p.N, p.nx, p.nu) == (2400, 9, 4)
    assert p.dt == 0.005 and p.g == 9.8
    np.testing.assert_array_equal(p.x0, np.zeros(9))
    assert QuadrotorParams().q == (1, 0, 1, 0, 1, 0, 1, 1, 1)


def test_hover_is_equilibrium():
    p = quadrotor(N=5)
    x = np.zeros((1, 9))
    u = p.hover_control()[None]
    np.testing.assert_allclose(p.dynamics(np.array([0]), x, u), x, atol=1e-15)


def test_yaw_periodicity():
    p = quadrotor(N=5)
    rng = np.random.default_rng(0)
    X, U = 0.5 * rng.normal(size=(20, 9)), rng.normal(size=(20, 4))
    X2 = X.copy()
    X2[:, 8] += 2 * np.pi
    ks = np.zeros(20, int)
    f1, f2 = p.dynamics(ks, X, U), p.dynamics(ks, X2, U)
    f2[:, 8] -= 2 * np.pi
    np.testing.assert_allclose(f1, f2, atol=1e-12)


def test_quadrotor_singular_pitch():
    p = quadrotor(N=5)
    X = np.zeros((1, 9))
    X[0, 7] = np.pi / 2
    with pytest.raises(TrigSingularity):
        p.dynamics(np.array([0]), X, np.zeros((1, 4)))


def test_quadrotor_reference_and_terminal_weight():
    p = quadrotor(N=100)
    np.testing.assert_allclose(p.ref[[0, -1]][:, [0, 2, 4]], 0.0, atol=1e-12)
    assert p.ref[25, 0] == pytest.approx(1.0)
    np.testing.assert_allclose(p.qN, np.asarray(QuadrotorParams().q) / p.dt)


def test_quadrotor_derivatives_20_points():
    p = quadrotor(N=20)
    rng = np.random.default_rng(1)
    worst = max(check_derivatives(p, _random_point(rng, p), h=1e-5) for _ in range(20))
    assert worst <= 1e-5


def test_plate_steady_state():
    p = thin_plate(mesh=6, N=4)
    X = np.full((1, p.nx), p.Tbar)
    np.testing.assert_allclose(p.rhs(X, np.zeros((1, p.nu))), 0.0, atol=1e-9)
    np.testing.assert_allclose(p.dynamics(np.array([0]), X, np.zeros((1, p.nu))), X, rtol=1e-12)


def test_plate_radiation_hessian():
    p = thin_plate(mesh=5, N=2)
    X = np.full((1, p.nx), p.Tbar)
    L = np.ones((1, p.nx))
    Fxx, _, _ = p.dynamics_hess(np.array([0]), X, np.zeros((1, p.nu)), L)
    expected = 12 * (2 * 0.5 * 5.67e-8 / 4) * 9e4
    np.testing.assert_allclose(np.diag(Fxx[0]) / p.dt, expected, rtol=1e-12)


def test_plate_sign_structure():
    p = thin_plate(mesh=5, N=2)
    X = np.full((1, p.nx), p.Tbar + 5.0)
    U = np.zeros((1, p.nu))
    lap = X @ p.lap.T + p.lap_bc
    loss = p.rhs(X, U) + lap
    assert np.all(loss > 0)
    direct = p.c1 * 5.0 + p.c2 * ((p.Tbar + 5) ** 4 - p.Tbar**4)
    np.testing.assert_allclose(loss, direct, rtol=1e-10)


def test_plate_dimensions_and_mesh_check():
    p = thin_plate(mesh=10, N=3)
    assert p.nx == p.nu == 64
    with pytest.raises(StructureError):
        thin_plate(mesh=2, N=3)


def test_plate_derivatives_uniform_state():
    p = thin_plate(mesh=5, N=6)
    rng = np.random.default_rng(2)
    at = _random_point(rng, p, scale_x=0.0, center=p.Tbar)
    assert check_derivatives(p, at, h=1e-4) <= 1e-5


def test_plate_derivatives_20_points():
    p = thin_plate(mesh=5, N=6)
    rng = np.random.default_rng(3)
    worst = max(check_derivatives(p, _random_point(rng, p, 5.0, p.Tbar), h=1e-4) for _ in range(20))
    assert worst <= 1e-5


def test_terminal_shift_moves_reference_only():
    p = quadrotor(N=10)
    d = np.arange(9.0)
    q = p.with_terminal_shift(d)
    np.testing.assert_allclose(q.ref[-1] - p.ref[-1], d)
    np.testing.assert_array_equal(q.ref[:-1], p.ref[:-1])
    np.testing.assert_array_equal(p.with_initial_state(d).x0, d)
