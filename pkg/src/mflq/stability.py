"""Stability analysis of the uncontrolled mean-field SDE

    dX = (A X + A_bar E X) dt + (C X + C_bar E X) dW.

The mean follows m' = (A + A_bar) m and the centered part Z = X - m follows
dZ = A Z dt + (C Z + (C + C_bar) m) dW. Decisions come from Lyapunov
equations and eigenvalue tests; combinations no criterion settles are
reported as unknown rather than guessed.
"""
from dataclasses import dataclass, field

import numpy as np

from .matkit import SingularOperatorError, lambda_min, lyapunov_residual, solve_lyapunov_linear, sym
from .model import CostWeights, MfLqProblem, SystemMatrices
from .simulate import FeedbackPolicy, SimConfig, SimulationOverflow, simulate

TRUE, FALSE, UNKNOWN = "true", "false", "unknown"
RANK_TOL = 1e-9
PSD_TOL = 1e-9


@dataclass(frozen=True)
class ScalarSystem:
    a: float
    a_bar: float
    c: float
    c_bar: float

    def __post_init__(self):
        for name in ("a", "a_bar", "c", "c_bar"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, v)

    def to_system(self):
        return SystemMatrices.build(
            1, 1, A=[[self.a]], A_bar=[[self.a_bar]], C=[[self.c]], C_bar=[[self.c_bar]]
        )


@dataclass
class LyapunovSolution:
    P: np.ndarray
    residual_norm: float
    psd: bool
    singular: bool = False


@dataclass
class StabilityVerdict:
    exp_stable: str
    globally_integrable: str
    asymptotically_stable: str
    qq_integrable: str
    evidence: dict = field(default_factory=dict)

    def __post_init__(self):
        chain = [self.exp_stable, self.globally_integrable, self.asymptotically_stable]
        for stronger, weaker in zip(chain, chain[1:]):
            if stronger == TRUE and weaker != TRUE:
                raise ValueError(f"verdict chain broken: {chain}")
            if weaker == FALSE and stronger != FALSE:
                raise ValueError(f"verdict chain broken: {chain}")
        for v in chain + [self.qq_integrable]:
            if v not in (TRUE, FALSE, UNKNOWN):
                raise ValueError(f"bad verdict {v!r}")

    def to_dict(self):
        return {
            "exp_stable": self.exp_stable,
            "globally_integrable": self.globally_integrable,
            "asymptotically_stable": self.asymptotically_stable,
            "qq_integrable": self.qq_integrable,
            "evidence": self.evidence,
        }


def solve_lyapunov(A, C, Q):
    """Solve P A + A^T P + C^T P C + Q = 0; a singular operator is flagged, not raised."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    Q = sym(np.atleast_2d(Q))
    try:
        P = solve_lyapunov_linear(A, C, Q)
    except SingularOperatorError:
        return LyapunovSolution(None, float("nan"), False, True)
    res = float(np.linalg.norm(lyapunov_residual(A, C, Q, P)))
    return LyapunovSolution(P, res, bool(lambda_min(P) >= -PSD_TOL), False)


def scalar_criterion(s, tol=None):
    """Exact one-dimensional test: a+a_bar < 0 and (2a+c^2 < 0 or c+c_bar = 0).

    With ``tol`` given, c + c_bar counts as zero when |c + c_bar| <= tol.
    """
    centered_ok = 2.0 * s.a + s.c * s.c < 0
    if tol is None:
        cancel = s.c + s.c_bar == 0.0
    else:
        cancel = abs(s.c + s.c_bar) <= tol
    return bool(s.a + s.a_bar < 0 and (centered_ok or cancel))


def scalar_second_moment(s, x0, t):
    """E|X(t)|^2 for the scalar system in closed form.

    E X = x0 e^{(a+a_bar) t} and the centered variance obeys
    V' = (2a + c^2) V + (c + c_bar)^2 (E X)^2 with V(0) = 0.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    r1 = 2.0 * (s.a + s.a_bar)
    r2 = 2.0 * s.a + s.c * s.c
    mean_sq = x0 * x0 * np.exp(r1 * t)
    k = (s.c + s.c_bar) ** 2
    if k == 0.0 or t == 0.0:
        return float(mean_sq)
    # int_0^t e^{r2 (t-u)} e^{r1 u} du = e^{hi t} (1 - e^{-|r1-r2| t}) / |r1-r2|
    hi = max(r1, r2)
    gap = abs(r1 - r2)
    if gap * t < 1e-300:
        integral = t * np.exp(hi * t)
    else:
        integral = np.exp(hi * t) * (-np.expm1(-gap * t)) / gap
    return float(mean_sq + k * x0 * x0 * integral)


def _null_space(M, tol=RANK_TOL):
    M = np.atleast_2d(M)
    if M.size == 0:
        return np.eye(M.shape[1])
    _, s, Vt = np.linalg.svd(M)
    scale = max(1.0, s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol * scale))
    return Vt[rank:].T


def _psd_sqrt(Q):
    w, V = np.linalg.eigh(sym(Q))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def weighted_square_integrable(F, W):
    """Is |W^{1/2} e^{F t}| square-integrable on [0, inf)?

    The unobservable subspace N of (F, W^{1/2}) is F-invariant and invisible
    to the weight, so the answer is whether F restricted to the quotient by N,
    i.e. V^T F V with V an orthonormal basis of N^perp, is Hurwitz.
    """
    F = np.atleast_2d(F)
    n = F.shape[0]
    H = _psd_sqrt(W)
    obs = np.vstack([H @ np.linalg.matrix_power(F, i) for i in range(n)])
    N = _null_space(obs)
    if N.shape[1] == n:
        return True
    if N.shape[1] == 0:
        V = np.eye(n)
    else:
        V = _null_space(N.T)
    return bool(np.max(np.linalg.eigvals(V.T @ F @ V).real) < 0)


def _nullspace_inclusion(Q, C, tol=RANK_TOL):
    """N(Q) inside N(C)?"""
    N = _null_space(Q)
    if N.shape[1] == 0:
        return True
    return bool(np.linalg.norm(C @ N) <= tol * max(1.0, np.linalg.norm(C)))


def classify(system, cost=None):
    """Stability verdicts for the uncontrolled system [A, A_bar, C, C_bar].

    ``cost`` supplies Q and Q_bar for the weighted notion; identity weights
    are used when it is omitted.
    """
    A, Ab, C, Cb = system.A, system.A_bar, system.C, system.C_bar
    n = A.shape[0]
    F = A + Ab
    Csum = C + Cb
    if cost is None:
        Q, Qsum = np.eye(n), 2.0 * np.eye(n)
    else:
        Q, Qsum = cost.Q, cost.Q_sum
    ev = {}
    abscissa = float(np.max(np.linalg.eigvals(F).real))
    ev["mean_abscissa"] = abscissa
    cancel = bool(np.linalg.norm(Csum) == 0.0)
    ev["diffusion_cancels"] = cancel
    lyap_I = solve_lyapunov(A, C, np.eye(n))
    ev["lyapunov_I_pd"] = None if lyap_I.singular else bool(lambda_min(lyap_I.P) > PSD_TOL)
    if lyap_I.P is not None:
        ev["lyapunov_I_min_eig"] = lambda_min(lyap_I.P)

    if n == 1:
        s = ScalarSystem(A[0, 0], Ab[0, 0], C[0, 0], Cb[0, 0])
        ok = scalar_criterion(s)
        ev["rule"] = "scalar_exact"
        stab = TRUE if ok else FALSE
    elif abscissa >= 0:
        ev["rule"] = "mean_unstable"
        stab = FALSE
    elif cancel or ev["lyapunov_I_pd"]:
        ev["rule"] = "diffusion_cancels" if cancel else "centered_lyapunov"
        stab = TRUE
    else:
        ev["rule"] = "no_criterion"
        stab = UNKNOWN

    # weighted integrability: the weighted mean must be square-integrable
    mean_ok = weighted_square_integrable(F, Qsum)
    ev["weighted_mean_integrable"] = mean_ok
    if stab == TRUE:
        qq = TRUE
    elif not mean_ok:
        qq = FALSE
    else:
        lyap_Q = solve_lyapunov(A, C, Q)
        centered_q = (not lyap_Q.singular) and lyap_Q.psd
        ev["lyapunov_Q_psd"] = None if lyap_Q.singular else lyap_Q.psd
        incl = _nullspace_inclusion(Qsum, Csum)
        ev["nullspace_inclusion"] = incl
        if cancel or (centered_q and incl):
            qq = TRUE
        else:
            qq = UNKNOWN
    return StabilityVerdict(stab, stab, stab, qq, ev)


@dataclass
class McMatrixEstimate:
    value: np.ndarray
    std_error: np.ndarray


def lyapunov_mc_oracle(A, C, Q, cfg):
    """Monte-Carlo estimate of E int_0^T Phi(t)^T Q Phi(t) dt.

    Phi solves dPhi = A Phi dt + C Phi dW with Phi(0) = I. Its columns are
    stacked into one state of dimension n^2 driven by a shared Brownian
    motion, and each entry of the integral is a quadratic observable. With
    X = m + Z, E int X^T H X = E int Z^T H Z + int m^T H m, so the sampled part
    is the centered one and the mean part is exact quadrature.
    Raises SimulationOverflow when the paths blow up.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    Q = sym(np.atleast_2d(Q))
    n = A.shape[0]
    N = n * n
    eye = np.eye(n)
    big = SystemMatrices.build(N, 1, A=np.kron(eye, A), C=np.kron(eye, C))
    zero = np.zeros((N, N))
    problem = MfLqProblem(big, CostWeights(zero, zero, [[0.0]], [[0.0]]), eye.reshape(-1, order="F"))
    pairs = [(i, j) for i in range(n) for j in range(i, n)]
    obs = []
    for i, j in pairs:
        E = np.zeros((n, n))
        E[i, j] = 1.0
        obs.append(np.kron(sym(E), Q))
    traj = simulate(problem, FeedbackPolicy.zero(1, N), cfg, observables=obs)
    vals = traj.observable_integrals
    m = traj.mean_path
    h = traj.times[1] - traj.times[0]
    est = np.zeros((n, n))
    se = np.zeros((n, n))
    for col, (i, j) in enumerate(pairs):
        v = vals[:, col]
        rate = np.einsum("ti,ij,tj->t", m, obs[col], m)
        mean_part = h * (rate.sum() - 0.5 * (rate[0] + rate[-1]))
        est[i, j] = est[j, i] = v.mean() + mean_part
        se[i, j] = se[j, i] = v.std(ddof=1) / np.sqrt(v.size) if v.size > 1 else 0.0
    return McMatrixEstimate(est, se)
