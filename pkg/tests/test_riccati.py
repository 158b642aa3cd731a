import numpy as np
import pytest
import scipy.linalg as sla

from mflq import riccati
from mflq.matkit import lambda_min
from mflq.model import CostWeights, SystemMatrices
from mflq.stabilize import StabilizerGains, verify_stabilizer
from conftest import printed, psd, random_problem, scalar_problem

ROOT2 = 1 + np.sqrt(2)


@pytest.fixture(scope="module")
def scalar():
    return scalar_problem(a=1, b=1, q=1, r=1, x0=2)


def test_scalar_exact_root_has_tiny_residuals(scalar):
    res = riccati.are_residuals(scalar.system, scalar.cost, [[ROOT2]], [[ROOT2]])
    assert res.r_norm <= 1e-12 and res.rbar_norm <= 1e-12


def test_zero_solution_of_homogeneous_equation():
    s = SystemMatrices.build(2, 1, A=-np.eye(2), B=np.ones((2, 1)))
    c = CostWeights(np.zeros((2, 2)), np.zeros((2, 2)), [[1.0]], [[1.0]])
    res = riccati.are_residuals(s, c, np.zeros((2, 2)), np.zeros((2, 2)))
    assert res.r_norm == 0 and res.rbar_norm == 0


def test_printed_benchmark_solution_nearly_solves(bench):
    res = riccati.are_residuals(bench.system, bench.cost, printed("P"), printed("Pi"))
    assert res.r_norm <= 5e-3 and res.rbar_norm <= 5e-3


def test_scalar_sdp(scalar):
    sol = riccati.solve_are_sdp(scalar.system, scalar.cost)
    assert sol.P[0, 0] == pytest.approx(ROOT2, abs=1e-6)
    assert sol.Pi[0, 0] == pytest.approx(ROOT2, abs=1e-6)
    assert sol.Gamma[0, 0] == pytest.approx(-ROOT2, abs=1e-6)
    assert sol.Gamma_bar[0, 0] == pytest.approx(-ROOT2, abs=1e-6)


def test_scalar_ode_monotone(scalar):
    sol, trace = riccati.solve_are_ode(scalar.system, scalar.cost)
    assert sol.P[0, 0] == pytest.approx(ROOT2, abs=1e-6)
    assert sol.Pi[0, 0] == pytest.approx(ROOT2, abs=1e-6)
    assert riccati.trace_monotone_violation(trace) >= -1e-8
    assert trace.converged_at is not None


def test_zero_weights_keep_ode_at_zero():
    s = SystemMatrices.build(2, 1, A=-np.eye(2), B=np.ones((2, 1)), C=0.1 * np.eye(2))
    c = CostWeights(np.zeros((2, 2)), np.zeros((2, 2)), [[1.0]], [[1.0]])
    sol, _ = riccati.solve_are_ode(s, c)
    assert np.array_equal(sol.P, np.zeros((2, 2))) and np.array_equal(sol.Pi, np.zeros((2, 2)))


def test_benchmark_matches_printed_and_ode(bench):
    sdp_sol = riccati.solve_are_sdp(bench.system, bench.cost)
    assert np.abs(sdp_sol.P - printed("P")).max() <= 5e-3
    assert np.abs(sdp_sol.Pi - printed("Pi")).max() <= 5e-3
    ode_sol, trace = riccati.solve_are_ode(bench.system, bench.cost)
    assert np.abs(ode_sol.P - sdp_sol.P).max() <= 1e-4
    assert np.abs(ode_sol.Pi - sdp_sol.Pi).max() <= 1e-4
    assert riccati.trace_monotone_violation(trace) >= -1e-8
    g = StabilizerGains(sdp_sol.Gamma, sdp_sol.Gamma_bar, "user")
    assert sdp_sol.Gamma.shape == (2, 5) and np.all(np.isfinite(sdp_sol.Gamma))
    assert verify_stabilizer(bench.system, g)
    assert riccati.dual_residuals(bench.system, bench.cost, sdp_sol.sdp_solution) <= 1e-4


def test_scalar_dual_residuals(scalar):
    sol = riccati.solve_are_sdp(scalar.system, scalar.cost)
    assert riccati.dual_residuals(scalar.system, scalar.cost, sol.sdp_solution) <= 1e-5


def test_deterministic_reduction_matches_classic_care():
    rng = np.random.default_rng(4)
    n, m = 3, 2
    A, B = rng.normal(size=(n, n)), rng.normal(size=(n, m))
    Q, Qb = psd(rng, n), psd(rng, n)
    R = np.eye(m)
    s = SystemMatrices.build(n, m, A=A, B=B)
    c = CostWeights(Q, Qb, R, 2 * R)
    sol = riccati.solve_are_sdp(s, c)
    # the maximal solution of the control ARE is its stabilizing solution
    P_ref = sla.solve_continuous_are(A, B, Q, R)
    Pi_ref = sla.solve_continuous_are(A, B, Q + Qb, 3 * R)
    assert np.allclose(sol.P, P_ref, atol=1e-6)
    assert np.allclose(sol.Pi, Pi_ref, atol=1e-6)


def test_classic_reduction_gives_equal_pair():
    rng = np.random.default_rng(6)
    n, m = 2, 1
    s = SystemMatrices.build(n, m, A=rng.normal(size=(n, n)) - 2 * np.eye(n), B=rng.normal(size=(n, m)),
                             C=0.4 * rng.normal(size=(n, n)), D=0.4 * rng.normal(size=(n, m)))
    c = CostWeights(psd(rng, n), np.zeros((n, n)), np.eye(m), np.zeros((m, m)))
    sol = riccati.solve_are_sdp(s, c)
    assert np.allclose(sol.P, sol.Pi, atol=1e-6)
    assert np.linalg.norm(riccati.riccati_map(s, c, sol.P)) <= 1e-6


def test_gains_reduce_without_diffusion():
    rng = np.random.default_rng(7)
    s = SystemMatrices.build(2, 1, A=-np.eye(2), B=rng.normal(size=(2, 1)), B_bar=rng.normal(size=(2, 1)))
    c = CostWeights(np.eye(2), np.eye(2), [[2.0]], [[1.0]])
    P, Pi = psd(rng, 2), psd(rng, 2)
    G, Gb = riccati.gains(s, c, P, Pi)
    assert np.allclose(G, -np.linalg.solve(c.R, s.B.T @ P))
    assert np.allclose(Gb, -np.linalg.solve(c.R_sum, s.B_sum.T @ Pi))


def test_indefinite_weights_need_anchor():
    p = scalar_problem(a=1, b=1, q=-1, r=1)
    with pytest.raises(riccati.AssumptionError):
        riccati.solve_are_sdp(p.system, p.cost)


def test_maximal_solution_monotone_in_weights():
    rng = np.random.default_rng(8)
    for _ in range(5):
        s = random_problem(rng, n=2, m=1)
        Q1, Qb1 = psd(rng, 2, 1), psd(rng, 2, 1)
        c1 = CostWeights(Q1, Qb1, np.eye(1), np.eye(1))
        c2 = CostWeights(Q1 + psd(rng, 2, 1), Qb1 + psd(rng, 2, 1), 1.5 * np.eye(1), 2 * np.eye(1))
        a, b = riccati.solve_are_sdp(s, c1), riccati.solve_are_sdp(s, c2)
        assert lambda_min(b.P - a.P) >= -1e-6
        assert lambda_min(b.Pi - a.Pi) >= -1e-6


def test_cross_method_agreement_random():
    rng = np.random.default_rng(9)
    for _ in range(3):
        s = random_problem(rng, n=2, m=1)
        c = CostWeights(psd(rng, 2), psd(rng, 2), np.eye(1), np.eye(1))
        a = riccati.solve_are_sdp(s, c)
        b, _ = riccati.solve_are_ode(s, c)
        assert np.linalg.norm(a.P - b.P) <= 1e-4 and np.linalg.norm(a.Pi - b.Pi) <= 1e-4
        assert verify_stabilizer(s, StabilizerGains(a.Gamma, a.Gamma_bar, "user"))


def test_epsilon_trend_shrinks(scalar):
    base, rows = riccati.epsilon_trend(scalar.system, scalar.cost, 0.1, levels=3)
    d = [r["P_distance"] for r in rows]
    assert d[0] > d[1] > d[2] >= 0


def test_polish_reduces_residual(scalar):
    P, Pi = np.array([[2.3]]), np.array([[2.5]])
    before = riccati.are_residuals(scalar.system, scalar.cost, P, Pi)
    P2, Pi2 = riccati.polish(scalar.system, scalar.cost, P, Pi)
    after = riccati.are_residuals(scalar.system, scalar.cost, P2, Pi2)
    assert after.r_norm < 1e-3 * before.r_norm and after.rbar_norm < 1e-3 * before.rbar_norm


def test_singular_inner_matrix_detected():
    p = scalar_problem(a=1, b=1, q=1, r=1)
    with pytest.raises(riccati.SingularInnerMatrixError):
        riccati.are_residuals(p.system, CostWeights([[1.0]], [[0.0]], [[0.0]], [[0.0]]), [[1.0]], [[1.0]])
