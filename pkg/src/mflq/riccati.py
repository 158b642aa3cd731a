"""Coupled algebraic Riccati equations for mean-field LQ control.

Two independent solvers: a max-trace SDP over the two Schur-complement LMIs,
and RK4 marching of the flipped-time differential Riccati pair from zero.
"""
from dataclasses import dataclass, field

import numpy as np

from . import sdp
from .matkit import SingularOperatorError, lambda_min, solve_lyapunov_linear, sym


class SingularInnerMatrixError(np.linalg.LinAlgError):
    pass


class ResidualCheckFailed(RuntimeError):
    pass


class AssumptionError(ValueError):
    pass


class NoConvergenceError(RuntimeError):
    pass


class SdpFailure(RuntimeError):
    def __init__(self, status, message=""):
        super().__init__(message or f"SDP solver returned status {status}")
        self.status = status


@dataclass
class AreResiduals:
    r_norm: float
    rbar_norm: float
    r_inner_min_eig: float
    rbar_inner_min_eig: float

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class AreSolution:
    P: np.ndarray
    Pi: np.ndarray
    Gamma: np.ndarray
    Gamma_bar: np.ndarray
    residuals: AreResiduals
    method: str
    anchor: tuple = None
    stats: dict = field(default_factory=dict)
    sdp_solution: object = None


@dataclass
class RiccatiOdeTrace:
    times: np.ndarray
    P_path: np.ndarray
    Pi_path: np.ndarray
    converged_at: float = None


def _inner(sys, cost, P):
    """Pieces of the two Riccati maps that depend on P only."""
    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    Cs, Ds = sys.C_sum, sys.D_sum
    W = sym(cost.R + D.T @ P @ D)
    L = P @ B + C.T @ P @ D
    Wbar = sym(cost.R_sum + Ds.T @ P @ Ds)
    return W, L, Wbar, Cs.T @ P @ Ds, Cs.T @ P @ Cs


def riccati_map(sys, cost, P):
    """PA + A^T P + C^T P C + Q - L W^{-1} L^T with L = PB + C^T P D, W = R + D^T P D."""
    A, C = sys.A, sys.C
    W, L, *_ = _inner(sys, cost, P)
    return sym(P @ A + A.T @ P + C.T @ P @ C + cost.Q - L @ np.linalg.solve(W, L.T))


def riccati_map_bar(sys, cost, P, Pi):
    As, Bs = sys.A_sum, sys.B_sum
    _, _, Wbar, CPD, CPC = _inner(sys, cost, P)
    Lbar = Pi @ Bs + CPD
    return sym(Pi @ As + As.T @ Pi + CPC + cost.Q_sum - Lbar @ np.linalg.solve(Wbar, Lbar.T))


def are_residuals(sys, cost, P, Pi, feas_tol=1e-7):
    W, _, Wbar, _, _ = _inner(sys, cost, P)
    w_min, wbar_min = lambda_min(W), lambda_min(Wbar)
    if w_min <= feas_tol or wbar_min <= feas_tol:
        raise SingularInnerMatrixError(
            f"inner matrices not positive definite (min eigs {w_min:.3g}, {wbar_min:.3g})"
        )
    return AreResiduals(
        r_norm=float(np.linalg.norm(riccati_map(sys, cost, P))),
        rbar_norm=float(np.linalg.norm(riccati_map_bar(sys, cost, P, Pi))),
        r_inner_min_eig=w_min,
        rbar_inner_min_eig=wbar_min,
    )


def gains(sys, cost, P, Pi):
    """Feedback gains for the centered state and for the mean."""
    W, L, Wbar, CPD, _ = _inner(sys, cost, P)
    if lambda_min(W) <= 0 or lambda_min(Wbar) <= 0:
        raise SingularInnerMatrixError("inner matrices not positive definite")
    Gamma = -np.linalg.solve(W, L.T)
    Gamma_bar = -np.linalg.solve(Wbar, (Pi @ sys.B_sum + CPD).T)
    return Gamma, Gamma_bar


def _tolerances(cost):
    return 1e-6 * (1 + np.linalg.norm(cost.Q)), 1e-6 * (1 + np.linalg.norm(cost.Q_sum))


def residuals_ok(cost, res):
    tol_r, tol_rbar = _tolerances(cost)
    return res.r_norm <= tol_r and res.rbar_norm <= tol_rbar


def _solution(sys, cost, P, Pi, method, anchor=None, stats=None, sdp_solution=None):
    P, Pi = sym(P), sym(Pi)
    Gamma, Gamma_bar = gains(sys, cost, P, Pi)
    return AreSolution(
        P=P,
        Pi=Pi,
        Gamma=Gamma,
        Gamma_bar=Gamma_bar,
        residuals=are_residuals(sys, cost, P, Pi),
        method=method,
        anchor=anchor,
        stats=stats or {},
        sdp_solution=sdp_solution,
    )


# SDP route


def are_layout(n):
    layout = sdp.VariableLayout()
    layout.add_symmetric("P", n)
    layout.add_symmetric("Pi", n)
    return layout


def build_are_sdp(sys, cost, anchor=None):
    """Max-trace SDP: the two Schur blocks plus optional anchoring blocks."""
    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    As, Bs, Cs, Ds = sys.A_sum, sys.B_sum, sys.C_sum, sys.D_sum
    layout = are_layout(sys.n)

    def centered_block(v):
        P = v["P"]
        L = P @ B + C.T @ P @ D
        return np.block([[P @ A + A.T @ P + C.T @ P @ C + cost.Q, L], [L.T, cost.R + D.T @ P @ D]])

    def mean_block(v):
        P, Pi = v["P"], v["Pi"]
        L = Pi @ Bs + Cs.T @ P @ Ds
        top = Pi @ As + As.T @ Pi + Cs.T @ P @ Cs + cost.Q_sum
        return np.block([[top, L], [L.T, cost.R_sum + Ds.T @ P @ Ds]])

    blocks = [layout.affine_block(centered_block), layout.affine_block(mean_block)]
    if anchor is not None:
        P0, Pi0 = anchor
        blocks.append(layout.affine_block(lambda v: v["P"] - P0))
        blocks.append(layout.affine_block(lambda v: v["Pi"] - Pi0))
    c = layout.linear_objective(lambda v: -np.trace(v["P"]) - np.trace(v["Pi"]))
    return sdp.SdpProblem(c, blocks), layout


def polish(sys, cost, P, Pi, steps=5):
    """Newton steps on the two residual maps.

    The derivative of the Riccati map at P is the closed-loop Lyapunov
    operator under the gain Gamma(P), so each step is one linear solve.
    """
    P, Pi = sym(P), sym(Pi)
    for _ in range(steps):
        Rp = riccati_map(sys, cost, P)
        Gamma, _ = gains(sys, cost, P, Pi)
        try:
            H = solve_lyapunov_linear(sys.A + sys.B @ Gamma, sys.C + sys.D @ Gamma, Rp)
        except SingularOperatorError:
            break
        if np.linalg.norm(riccati_map(sys, cost, P + H)) >= np.linalg.norm(Rp):
            break
        P = sym(P + H)
    for _ in range(steps):
        Rb = riccati_map_bar(sys, cost, P, Pi)
        _, Gamma_bar = gains(sys, cost, P, Pi)
        F = sys.A_sum + sys.B_sum @ Gamma_bar
        try:
            H = solve_lyapunov_linear(F, np.zeros_like(F), Rb)
        except SingularOperatorError:
            break
        if np.linalg.norm(riccati_map_bar(sys, cost, P, Pi + H)) >= np.linalg.norm(Rb):
            break
        Pi = sym(Pi + H)
    return P, Pi


def _check_anchor(sys, cost, anchor, tol):
    P0, Pi0 = anchor
    block = build_are_sdp(sys, cost)[0].blocks
    layout = are_layout(sys.n)
    x0 = layout.pack({"P": P0, "Pi": Pi0})
    worst = min(lambda_min(b.value(x0)) for b in block)
    if worst < -tol:
        raise AssumptionError(f"anchor does not satisfy the LMIs (lambda_min {worst:.3g})")


def solve_are_sdp(sys, cost, anchor=None, opts=None):
    opts = opts or sdp.SdpOptions()
    if anchor is None:
        signs = [lambda_min(cost.Q), lambda_min(cost.Q_sum)]
        if min(signs) < -opts.feas_tol or lambda_min(cost.R) <= 0 or lambda_min(cost.R_sum) <= 0:
            raise AssumptionError("(0, 0) is not feasible: need Q, Q+Q_bar >= 0 and R, R+R_bar > 0")
    else:
        anchor = (sym(anchor[0]), sym(anchor[1]))
        _check_anchor(sys, cost, anchor, opts.feas_tol)
    problem, layout = build_are_sdp(sys, cost, anchor)
    sol = sdp.solve(problem, opts)
    stats = {"sdp_status": sol.status, "newton_steps": sol.newton_steps, "duality_gap": sol.duality_gap, "escalated": False, "polished": False}
    if sol.status != sdp.OPTIMAL:
        raise SdpFailure(sol.status)
    v = layout.unpack(sol.x)
    P, Pi = v["P"], v["Pi"]
    res = are_residuals(sys, cost, P, Pi)
    if not residuals_ok(cost, res):
        tighter = sdp.SdpOptions(
            feas_tol=opts.feas_tol,
            gap_tol=opts.gap_tol / 100,
            max_newton=opts.max_newton,
            max_outer=opts.max_outer,
            phase1_bound=opts.phase1_bound,
        )
        retry = sdp.solve(problem, tighter)
        stats["escalated"] = True
        if retry.status == sdp.OPTIMAL:
            sol = retry
            v = layout.unpack(sol.x)
            P, Pi = v["P"], v["Pi"]
        P, Pi = polish(sys, cost, P, Pi)
        stats["polished"] = True
        res = are_residuals(sys, cost, P, Pi)
        if not residuals_ok(cost, res):
            raise ResidualCheckFailed(
                f"ARE residuals {res.r_norm:.3g}, {res.rbar_norm:.3g} exceed tolerance after polishing"
            )
    return _solution(sys, cost, P, Pi, "sdp", anchor, stats, sol)


def refine(sol, sys, cost, steps=5):
    """Polished copy of an accepted solution (tighter residuals, same method tag)."""
    P, Pi = polish(sys, cost, sol.P, sol.Pi, steps)
    out = _solution(sys, cost, P, Pi, sol.method, sol.anchor, dict(sol.stats), sol.sdp_solution)
    out.stats["polished"] = True
    return out


def dual_residuals(sys, cost, sdp_solution):
    """Largest violation of the dual equalities and complementarity products.

    The dual blocks are read as Z1 = [[S, U^T], [U, V]] and Z2 likewise with
    bars; W, W_bar are the anchoring duals (zero when not anchored).
    """
    n, m = sys.n, sys.m
    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    As, Bs, Cs, Ds = sys.A_sum, sys.B_sum, sys.C_sum, sys.D_sum
    Z = sdp_solution.dual_Z
    S, U, V = Z[0][:n, :n], Z[0][n:, :n], Z[0][n:, n:]
    Sb, Ub, Vb = Z[1][:n, :n], Z[1][n:, :n], Z[1][n:, n:]
    W = Z[2] if len(Z) > 2 else np.zeros((n, n))
    Wb = Z[3] if len(Z) > 3 else np.zeros((n, n))
    eye = np.eye(n)
    eq1 = (
        A @ S + S @ A.T + B @ U + U.T @ B.T + C @ S @ C.T + D @ U @ C.T + C @ U.T @ D.T + D @ V @ D.T
        + Cs @ Sb @ Cs.T + Ds @ Ub @ Cs.T + Cs @ Ub.T @ Ds.T + Ds @ Vb @ Ds.T + W + eye
    )
    eq2 = As @ Sb + Sb @ As.T + Bs @ Ub + Ub.T @ Bs.T + Wb + eye
    P, Pi = sdp.smat(sdp_solution.x[: n * (n + 1) // 2], n), sdp.smat(sdp_solution.x[n * (n + 1) // 2:], n)
    L11 = P @ A + A.T @ P + C.T @ P @ C + cost.Q
    cs1 = L11 @ S + (P @ B + C.T @ P @ D) @ U
    Lb11 = Pi @ As + As.T @ Pi + Cs.T @ P @ Cs + cost.Q_sum
    cs2 = Lb11 @ Sb + (Pi @ Bs + Cs.T @ P @ Ds) @ Ub
    return float(max(np.abs(eq1).max(), np.abs(eq2).max(), np.abs(cs1).max(), np.abs(cs2).max()))


# ODE route


def _inv2(W):
    a, b, c, d = W.ravel().tolist()
    det = a * d - b * c
    return np.array(((d / det, -b / det), (-c / det, a / det)))


def _ode_rhs_factory(sys, cost):
    """Right-hand side of the flipped-time Riccati pair on the stacked vector (vec P, vec Pi).

    Every term except the two quadratic corrections is affine in the state, so
    those are gathered into one matrix product per call. This runs hundreds of
    thousands of times on tiny matrices, hence the flat layout.
    """
    n, m = sys.n, sys.m
    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    As, Bs, Cs, Ds = sys.A_sum, sys.B_sum, sys.C_sum, sys.D_sum

    def pieces(P, Pi):
        return [
            P @ A + A.T @ P + C.T @ P @ C,
            P @ B + C.T @ P @ D,
            D.T @ P @ D,
            Pi @ As + As.T @ Pi + Cs.T @ P @ Cs,
            Pi @ Bs + Cs.T @ P @ Ds,
            Ds.T @ P @ Ds,
        ]

    def flat(parts):
        return np.concatenate([q.reshape(-1) for q in parts])

    nn = n * n
    const = flat([cost.Q, np.zeros((n, m)), cost.R, cost.Q_sum, np.zeros((n, m)), cost.R_sum])
    cols = []
    for i in range(2 * nn):
        e = np.zeros(2 * nn)
        e[i] = 1.0
        cols.append(flat(pieces(e[:nn].reshape(n, n), e[nn:].reshape(n, n))))
    M = np.array(cols).T
    cuts = np.cumsum([nn, n * m, m * m, nn, n * m, m * m])
    solve = np.linalg.solve

    if n == 1 and m == 1:
        (p1, p2), (l1, l2), (w1, w2), (q1, q2), (lb1, lb2), (wb1, wb2) = M.tolist()
        k0 = const.tolist()

        def scalar_rhs(y):
            p, pi = y.tolist()
            ell = l1 * p + l2 * pi
            ellb = lb1 * p + lb2 * pi
            return np.array((
                p1 * p + p2 * pi + k0[0] - ell * ell / (w1 * p + w2 * pi + k0[2]),
                q1 * p + q2 * pi + k0[3] - ellb * ellb / (wb1 * p + wb2 * pi + k0[5]),
            ))

        return scalar_rhs

    def rhs(y):
        z = M @ y + const
        dP = z[: cuts[0]]
        L = z[cuts[0]: cuts[1]].reshape(n, m)
        W = z[cuts[1]: cuts[2]].reshape(m, m)
        dPi = z[cuts[2]: cuts[3]]
        Lb = z[cuts[3]: cuts[4]].reshape(n, m)
        Wb = z[cuts[4]: cuts[5]].reshape(m, m)
        if m == 1:
            corr = (L @ L.T) / W[0, 0]
            corr_b = (Lb @ Lb.T) / Wb[0, 0]
        elif m == 2:
            corr = L @ _inv2(W) @ L.T
            corr_b = Lb @ _inv2(Wb) @ Lb.T
        else:
            corr = L @ solve(W, L.T)
            corr_b = Lb @ solve(Wb, Lb.T)
        return np.concatenate((dP - corr.reshape(-1), dPi - corr_b.reshape(-1)))

    return rhs


def solve_are_ode(sys, cost, dt=1e-3, t_max=200.0, conv_tol=1e-9, blowup=1e12):
    """RK4 on dP/ds = R(P), dPi/ds = Rbar(P, Pi) from zero.

    Convergence is tested on snapshots one time unit apart.
    """
    if min(lambda_min(cost.Q), lambda_min(cost.Q_sum)) < -1e-9 or lambda_min(cost.R) <= 0 or lambda_min(cost.R_sum) <= 0:
        raise AssumptionError("ODE marching needs Q, Q+Q_bar >= 0 and R, R+R_bar > 0")
    n = sys.n
    nn = n * n
    y = np.zeros(2 * nn)
    per_unit = max(1, int(round(1.0 / dt)))
    times, Ps, Pis = [0.0], [np.zeros((n, n))], [np.zeros((n, n))]
    converged = None
    steps = int(np.ceil(t_max / dt))
    f = _ode_rhs_factory(sys, cost)
    h2, h6 = 0.5 * dt, dt / 6.0
    for k in range(1, steps + 1):
        k1 = f(y)
        k2 = f(y + h2 * k1)
        k3 = f(y + h2 * k2)
        k4 = f(y + dt * k3)
        y = y + h6 * (k1 + 2.0 * (k2 + k3) + k4)
        if k % per_unit == 0:
            if not np.all(np.isfinite(y)) or np.abs(y).max() > blowup:
                raise NoConvergenceError(f"Riccati flow blew up at s = {k * dt:.3g}")
            P, Pi = sym(y[:nn].reshape(n, n)), sym(y[nn:].reshape(n, n))
            # the skew part is an unstable mode of the vectorized flow, so drop it
            y = np.concatenate((P.reshape(-1), Pi.reshape(-1)))
            change = np.linalg.norm(P - Ps[-1]) + np.linalg.norm(Pi - Pis[-1])
            times.append(k * dt)
            Ps.append(P)
            Pis.append(Pi)
            if change <= conv_tol:
                converged = k * dt
                break
    P, Pi = sym(y[:nn].reshape(n, n)), sym(y[nn:].reshape(n, n))
    trace = RiccatiOdeTrace(np.array(times), np.array(Ps), np.array(Pis), converged)
    if converged is None:
        raise NoConvergenceError(f"Riccati flow did not settle by s = {t_max}")
    sol = _solution(sys, cost, P, Pi, "ode", stats={"converged_at": converged, "steps": k})
    return sol, trace


def trace_monotone_violation(trace):
    """Most negative eigenvalue over successive snapshot differences."""
    worst = 0.0
    for a, b in zip(trace.P_path[:-1], trace.P_path[1:]):
        worst = min(worst, lambda_min(b - a))
    for a, b in zip(trace.Pi_path[:-1], trace.Pi_path[1:]):
        worst = min(worst, lambda_min(b - a))
    return worst


def epsilon_trend(sys, cost, eps, levels=4, opts=None):
    """Solve with Q, Q_bar shifted by eps * 10^-j and report the distance to the unshifted solution."""
    base = solve_are_sdp(sys, cost, opts=opts)
    rows = []
    for j in range(levels):
        e = eps * 10.0 ** (-j)
        s = solve_are_sdp(sys, cost.shifted(e), opts=opts)
        rows.append({
            "epsilon": e,
            "P_distance": float(np.linalg.norm(s.P - base.P)),
            "Pi_distance": float(np.linalg.norm(s.Pi - base.Pi)),
        })
    return base, rows
