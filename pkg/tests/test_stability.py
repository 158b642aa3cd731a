import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from mflq import stability
from mflq.model import CostWeights, SystemMatrices, load_problem
from mflq.simulate import SimConfig
from mflq.stability import FALSE, TRUE, UNKNOWN, ScalarSystem, classify, scalar_criterion, scalar_second_moment
from conftest import data_path


def scalar_sys(a, a_bar, c, c_bar):
    return ScalarSystem(a, a_bar, c, c_bar).to_system()


def moment_by_quadrature(s, x0, t):
    r1, r2 = 2 * (s.a + s.a_bar), 2 * s.a + s.c ** 2
    k = (s.c + s.c_bar) ** 2
    inner, _ = quad(lambda u: np.exp(r2 * (t - u) + r1 * u), 0.0, t, epsabs=1e-14, epsrel=1e-13)
    return x0 ** 2 * (np.exp(r1 * t) + k * inner)


@pytest.mark.parametrize("a,c,q,p,ok", [(-1, 0, 2, 1, True), (0, 1, 1, -1, False)])
def test_solve_lyapunov_scalar(a, c, q, p, ok):
    sol = stability.solve_lyapunov([[a]], [[c]], [[q]])
    assert sol.P[0, 0] == pytest.approx(p, abs=1e-12)
    assert sol.psd == ok and sol.residual_norm <= 1e-12


def test_open_loop_benchmark_has_no_psd_solution(bench):
    s = bench.system
    assert not stability.solve_lyapunov(s.A, s.C, np.eye(5)).psd


def test_singular_lyapunov_flagged():
    assert stability.solve_lyapunov([[0.0]], [[0.0]], [[1.0]]).singular


def test_classify_stable_ode():
    s = SystemMatrices.build(2, 1, A=-np.eye(2))
    v = classify(s)
    assert (v.exp_stable, v.globally_integrable, v.asymptotically_stable, v.qq_integrable) == (TRUE,) * 4


def test_classify_unstable_mean():
    v = classify(load_problem(data_path("unstabilizable_scalar.json")).system)
    assert (v.exp_stable, v.globally_integrable, v.asymptotically_stable) == (FALSE,) * 3


def test_classify_cancelling_diffusion_overrides_centered_growth():
    v = classify(scalar_sys(-1, 0.5, 2, -2))
    assert v.exp_stable == TRUE


@pytest.mark.parametrize("args,expected", [
    ((-1, 0, 0, 0), True),
    ((1, -3, 2, -2), True),
    ((1, -3, 2, 0), False),
])
def test_scalar_criterion_examples(args, expected):
    assert scalar_criterion(ScalarSystem(*args)) is expected


def test_scalar_criterion_tolerance_form():
    s = ScalarSystem(1, -3, 2, -2 + 1e-12)
    assert not scalar_criterion(s)
    assert scalar_criterion(s, tol=1e-9)


def test_second_moment_special_cases():
    s = ScalarSystem(-0.3, 0.1, 1.0, -1.0)
    assert scalar_second_moment(s, 2.0, 3.0) == pytest.approx(4 * np.exp(2 * (-0.2) * 3), rel=1e-15)
    assert scalar_second_moment(ScalarSystem(0.4, 1, 2, 3), 1.5, 0.0) == 2.25


def test_second_moment_matches_quadrature():
    s = ScalarSystem(-1, 0.5, 1, 0)
    assert scalar_second_moment(s, 1.0, 1.0) == pytest.approx(moment_by_quadrature(s, 1.0, 1.0), abs=1e-10)


def test_second_moment_resonant_rates():
    # 2(a + a_bar) == 2a + c^2 here, which takes the t e^{rt} branch
    s = ScalarSystem(-1, 0.5, 1, 0)
    assert 2 * (s.a + s.a_bar) == 2 * s.a + s.c ** 2
    assert scalar_second_moment(s, 1.0, 1.0) == pytest.approx(2 * np.exp(-1), rel=1e-14)


coef = st.floats(-3, 3, allow_nan=False)


@settings(max_examples=150, deadline=None)
@given(coef, coef, coef, coef, st.floats(0.01, 10))
def test_second_moment_agrees_with_quadrature(a, ab, c, cb, t):
    s = ScalarSystem(a, ab, c, cb)
    ref = moment_by_quadrature(s, 1.0, t)
    assert scalar_second_moment(s, 1.0, t) == pytest.approx(ref, rel=1e-8, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(coef, min_size=8, max_size=8), st.booleans())
def test_classify_never_breaks_the_implication_chain(vals, diag_cost):
    A = np.array(vals[:4]).reshape(2, 2)
    Ab = np.array(vals[4:8]).reshape(2, 2) * 0.5
    C = 0.3 * A.T
    s = SystemMatrices.build(2, 1, A=A, A_bar=Ab, C=C, C_bar=-C if diag_cost else None)
    cost = CostWeights(np.diag([1.0, 0.0]), np.zeros((2, 2)), [[1.0]], [[0.0]]) if diag_cost else None
    v = classify(s, cost)
    chain = [v.exp_stable, v.globally_integrable, v.asymptotically_stable]
    for stronger, weaker in zip(chain, chain[1:]):
        assert not (stronger == TRUE and weaker != TRUE)
        assert not (weaker == FALSE and stronger != FALSE)
    if v.exp_stable == TRUE:
        assert v.qq_integrable == TRUE


def test_verdict_rejects_broken_chain():
    with pytest.raises(ValueError):
        stability.StabilityVerdict(TRUE, FALSE, FALSE, TRUE)


def test_classify_reports_unknown_outside_criteria():
    # stable mean, cancelling nothing, centered Lyapunov not positive definite
    A = np.array([[-1.0, 0.0], [0.0, -1.0]])
    C = np.array([[1.6, 0.0], [0.0, 0.0]])
    s = SystemMatrices.build(2, 1, A=A, C=C, C_bar=np.array([[0.0, 0.0], [0.0, 1.0]]))
    assert classify(s).exp_stable == UNKNOWN


def test_weighted_integrability_ignores_invisible_unstable_mode():
    F = np.diag([1.0, -1.0])
    assert stability.weighted_square_integrable(F, np.diag([0.0, 1.0]))
    assert not stability.weighted_square_integrable(F, np.diag([1.0, 0.0]))


def test_lyapunov_oracle_zero_weight_is_zero():
    est = stability.lyapunov_mc_oracle([[-1.0]], [[1.0]], [[0.0]], SimConfig(dt=1e-2, horizon=1, paths=64))
    assert est.value[0, 0] == 0.0


@pytest.mark.parametrize("a,c,q", [(-1.0, 0.0, 2.0), (-1.0, 1.0, 1.0)])
def test_lyapunov_oracle_scalar(a, c, q):
    dt = 2e-3
    est = stability.lyapunov_mc_oracle([[a]], [[c]], [[q]], SimConfig(dt=dt, horizon=15, paths=4000, record_paths=0))
    exact = stability.solve_lyapunov([[a]], [[c]], [[q]]).P[0, 0]
    assert abs(est.value[0, 0] - exact) <= 3 * est.std_error[0, 0] + 2 * dt + np.exp(-15)


def test_lyapunov_oracle_matrix_case():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(2, 2)) - 3 * np.eye(2)
    C = 0.5 * rng.normal(size=(2, 2))
    G = rng.normal(size=(2, 2))
    Q = G @ G.T
    dt = 2e-3
    est = stability.lyapunov_mc_oracle(A, C, Q, SimConfig(dt=dt, horizon=8, paths=2000, record_paths=0))
    exact = stability.solve_lyapunov(A, C, Q).P
    scale = 1 + np.abs(exact).max()
    assert np.all(np.abs(est.value - exact) <= 3 * est.std_error + 2 * dt * scale)
