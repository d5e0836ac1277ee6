import numpy as np
import pytest

from instances import double_integrator_lq, random_reh_lq, scalar_lq
from schwarz_ocp.core import norm_w
from schwarz_ocp.lq import convexify, dense_kkt_solve, lq_solve, riccati_factor
from schwarz_ocp.nlp import LqOcp
from schwarz_ocp.sensitivity import (Direction, EdsReport, NotAtKkt, Perturbation, PerturbationSolveError,
                                     build_sensitivity_lqp, eds_probe, fit_decay, gaussian_perturbations,
                                     write_eds_summary)


def lq_solver(q, start):
    return lq_solve(q.as_lq())


@pytest.fixture
def base():
    rng = np.random.default_rng(0)
    lq = random_reh_lq(rng, 12, 3, 2, margin=0.3)
    p = LqOcp(lq)
    return lq, p, lq_solve(lq)


def test_zero_direction(base):
    lq, p, sol = base
    s = build_sensitivity_lqp(p, sol, Direction.initial(np.zeros(3)))
    assert norm_w(lq_solve(s)) == 0.0


def test_initial_state_direction_matches_fd(base):
    lq, p, sol = base
    e = np.array([1.0, -2.0, 0.5])
    s = lq_solve(build_sensitivity_lqp(p, sol, Direction.initial(e)))
    h = 1e-6
    fd = (lq_solve(lq.with_(x0=lq.x0 + h * e)) - sol) * (1.0 / h)
    assert norm_w(s - fd) <= 1e-4


def test_data_direction_matches_fd(base):
    lq, p, sol = base
    rng = np.random.default_rng(1)
    l = rng.normal(size=(13, 3))
    s = lq_solve(build_sensitivity_lqp(p, sol, Direction(np.zeros(3), l)))
    h = 1e-6
    pert = p.with_data(h * l)
    fd = (lq_solve(pert.as_lq()) - sol) * (1.0 / h)
    assert norm_w(s - fd) <= 1e-4


def test_convexified_relation(base):
    lq, p, sol = base
    s = build_sensitivity_lqp(p, sol, Direction.initial(np.ones(3)))
    c = convexify(s)
    t, tc = dense_kkt_solve(s), dense_kkt_solve(c.problem)
    for k in range(-1, s.N):
        np.testing.assert_allclose(t.lam_at(k), tc.lam_at(k) - 2 * c.Qbar[k + 1] @ t.x[k + 1], atol=1e-7)


def test_not_at_kkt(base):
    _, p, sol = base
    with pytest.raises(NotAtKkt):
        build_sensitivity_lqp(p, sol * 1.1, Direction.initial(np.ones(3)))


def test_zero_magnitude_gives_zero_deviation(base):
    lq, p, sol = base
    reps = eds_probe(p, lq_solver, gaussian_perturbations(3, 2, 0.0), reference=sol)
    for r in reps:
        assert np.all(r.deviations == 0.0)


def test_scalar_decay_rate_is_closed_loop_pole():
    N = 60
    p = LqOcp(scalar_lq(Q=np.ones((N, 1, 1)), S=np.zeros((N, 1, 1)), R=np.ones((N, 1, 1)),
                        A=np.full((N, 1, 1), 0.5), B=np.ones((N, 1, 1)), x0=[0.0]))
    f = riccati_factor(p.p)
    ref = lq_solve(p.p)
    (rep,) = eds_probe(p, lq_solver, [Perturbation(dx0=np.array([1.0]))], reference=ref, skip=2, floor=1e-300)
    E0 = abs(f.E[0, 0, 0])
    d = rep.deviations
    ratios = d[3:30] / d[2:29]
    np.testing.assert_allclose(ratios, E0, rtol=1e-6)
    assert rep.rho_hat == pytest.approx(E0, rel=0.05)


def test_superposition_lq():
    lq = double_integrator_lq(N=100)
    p = LqOcp(lq)
    ref = lq_solve(lq)
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=2), rng.normal(size=2)
    both, init, term = eds_probe(p, lq_solver, [Perturbation(a, b), Perturbation(dx0=a), Perturbation(dref=b)],
                                 reference=ref)
    assert np.all(both.deviations <= 1.1 * (init.deviations + term.deviations) + 1e-14)


def test_monotone_envelope_lq():
    lq = double_integrator_lq(N=150)
    p = LqOcp(lq)
    ref = lq_solve(lq)
    reps = eds_probe(p, lq_solver, gaussian_perturbations(2, 5, 1.0, seed=3, boundary="initial"), reference=ref)
    t = 5
    for r in reps:
        d = r.deviations[t:]
        tail_max = np.maximum.accumulate(d[::-1])[::-1]  # max over stages at or beyond k
        assert np.all(np.diff(tail_max) <= 1e-15)
        assert r.rho_hat < 1


def test_gaussian_perturbations_are_seeded_and_scaled():
    a = gaussian_perturbations(4, 3, 0.2, seed=7)
    b = gaussian_perturbations(4, 3, 0.2, seed=7)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.dx0, y.dx0)
        assert np.linalg.norm(x.dx0) == pytest.approx(0.2)
        assert x.boundary == "both" and x.magnitude == pytest.approx(0.2)
    assert gaussian_perturbations(4, 1, 0.2, boundary="terminal")[0].dx0 is None


def test_fit_decay_recovers_rate():
    dev = 3.0 * 0.8 ** np.arange(60)
    rho, ups, pts = fit_decay(dev, "initial", 1.5, skip=5)
    assert rho == pytest.approx(0.8) and ups == pytest.approx(2.0)
    rho, _, _ = fit_decay(dev[::-1], "terminal", 1.0, skip=5)
    assert rho == pytest.approx(0.8)
    rho, _, pts = fit_decay(dev[:8], "initial", 1.0, skip=5)
    assert np.isnan(rho) and pts < 5


def test_failure_carries_descriptor():
    def bad(q, start):
        raise RuntimeError("boom")

    lq = double_integrator_lq(N=20)
    with pytest.raises(PerturbationSolveError) as ei:
        eds_probe(LqOcp(lq), bad, [Perturbation(dx0=np.ones(2))], reference=lq_solve(lq))
    assert ei.value.index == 0 and "initial" in str(ei.value)


def test_csv_outputs(tmp_path):
    rep = EdsReport(np.array([1.0, 0.5, 0.25]), 0.5, 1.0, "initial", 1.0, 3)
    rep.write_csv(tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().splitlines() == ["stage,deviation", "-1,1.0", "0,0.5", "1,0.25"]
    write_eds_summary([rep], tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "rho_hat,upsilon_hat,boundary,magnitude"
    assert rep.at(-1) == 1.0 and rep.N == 1


def test_workers_do_not_change_results():
    lq = double_integrator_lq(N=60)
    p, ref = LqOcp(lq), lq_solve(lq)
    perts = gaussian_perturbations(2, 4, 0.5, seed=1)
    a = eds_probe(p, lq_solver, perts, reference=ref, workers=1)
    b = eds_probe(p, lq_solver, perts, reference=ref, workers=3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.deviations, y.deviations)


def test_reference_computed_when_missing():
    lq = double_integrator_lq(N=30)
    (rep,) = eds_probe(LqOcp(lq), None, [Perturbation(dx0=np.array([0.1, 0.0]))])
    assert rep.deviations[1] >= 0.1 - 1e-12
    assert rep.deviations[-1] < rep.deviations[1]
