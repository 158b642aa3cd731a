"""End-to-end synthesis and verification of the optimal mean-field LQ controller."""
from dataclasses import dataclass, field

import numpy as np

from . import riccati
from .model import check_assumptions
from .simulate import CostEstimate, FeedbackPolicy, SimConfig, estimate_cost, simulate, SimulationOverflow
from .stabilize import StabilizerGains, verify_stabilizer

METHODS = ("sdp", "ode", "both")
# cross-method agreement required when both solvers run
CROSS_TOL = 1e-4
# relative allowance on top of 3 standard errors for Monte-Carlo value checks
VALUE_RTOL = 0.01
# a running cost still above this fraction of its start at T triggers a longer run
TAIL_RATIO = 1e-4


class AssumptionGateError(ValueError):
    def __init__(self, failed, report):
        super().__init__("assumption gate failed: " + "; ".join(failed))
        self.failed = failed
        self.report = report


class CrossCheckError(RuntimeError):
    pass


@dataclass
class SolveOptions:
    method: str = "sdp"
    tol: float = 1e-9
    epsilon: float = 0.0
    anchor: tuple = None
    skip_verify: bool = False
    sim: SimConfig = field(default_factory=SimConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")


@dataclass
class VerificationReport:
    mc_cost: CostEstimate = None
    value_gap: float = None
    cs_residual: CostEstimate = None
    stabilizer_ok: bool = None
    within_budget: bool = None
    skipped: list = field(default_factory=list)
    # kept for plotting, not serialized
    trajectory: object = None

    def to_dict(self):
        return {
            "mc_cost": None if self.mc_cost is None else self.mc_cost.to_dict(),
            "value_gap": self.value_gap,
            "cs_residual": None if self.cs_residual is None else self.cs_residual.to_dict(),
            "stabilizer_ok": self.stabilizer_ok,
            "within_budget": self.within_budget,
            "skipped": list(self.skipped),
        }


@dataclass
class MfLqSolution:
    are: riccati.AreSolution
    policy: FeedbackPolicy
    predicted_value: float
    verification: VerificationReport
    assumptions: object = None
    ode: riccati.AreSolution = None
    ode_trace: riccati.RiccatiOdeTrace = None
    cross_gap: float = None


def _gate(p, opts):
    rep = check_assumptions(p, opts.tol)
    if opts.anchor is not None:
        return rep
    failed = []
    if not rep.holds_J:
        failed.append("(J) fails: need Q, Q+Q_bar >= 0 and R, R+R_bar > 0")
    if not rep.ode_pair_stabilizable:
        failed.append("ODE pair [A+A_bar;B+B_bar] not stabilizable")
    if not rep.sde_pair_stabilizable:
        failed.append("SDE pair [A,C;B,D] not stabilizable")
    if failed:
        raise AssumptionGateError(failed, rep)
    return rep


def solve_mflq(p, opts=None):
    """Solve the coupled AREs, assemble the optimal policy and verify it."""
    opts = opts or SolveOptions()
    rep = _gate(p, opts)
    s = p.system
    cost = p.cost.shifted(opts.epsilon) if opts.epsilon > 0 else p.cost
    sdp_sol = ode_sol = trace = None
    if opts.method in ("sdp", "both"):
        sdp_sol = riccati.solve_are_sdp(s, cost, anchor=opts.anchor)
    if opts.method in ("ode", "both"):
        ode_sol, trace = riccati.solve_are_ode(s, cost)
    gap = None
    if sdp_sol is not None and ode_sol is not None:
        gap = float(max(np.linalg.norm(sdp_sol.P - ode_sol.P), np.linalg.norm(sdp_sol.Pi - ode_sol.Pi)))
        if gap > CROSS_TOL:
            raise CrossCheckError(f"SDP and ODE solutions differ by {gap:.3g}")
    are = sdp_sol if sdp_sol is not None else ode_sol
    policy = FeedbackPolicy(are.Gamma, are.Gamma_bar)
    predicted = float(p.x0 @ are.Pi @ p.x0)
    sol = MfLqSolution(are, policy, predicted, VerificationReport(skipped=["all"]), rep, ode_sol, trace, gap)
    if not opts.skip_verify:
        sol.verification = verify_value(p, sol, opts.sim)
    return sol


def _penalty_forms(p, are, candidate):
    """Quadratic forms of the two completion-of-squares penalties.

    With W = R + D^T P D and Wb = R + R_bar + (D+D_bar)^T P (D+D_bar), the
    centered penalty is Z^T (K - Gamma)^T W (K - Gamma) Z and the mean
    penalty is m^T (K_bar - Gamma_bar)^T Wb (K_bar - Gamma_bar) m.
    """
    s, c = p.system, p.cost
    W = c.R + s.D.T @ are.P @ s.D
    Wb = c.R_sum + s.D_sum.T @ are.P @ s.D_sum
    dK = candidate.K - are.Gamma
    dKb = candidate.K_bar - are.Gamma_bar
    return dK.T @ W @ dK, dKb.T @ Wb @ dKb


def _run(p, policy, cfg, observables=()):
    """Simulate, lengthening the horizon to 2T once if the running cost has not settled."""
    traj = simulate(p, policy, cfg, observables)
    rc = traj.running_cost_mean
    if rc[0] > 0 and rc[-1] > TAIL_RATIO * rc[0]:
        cfg = SimConfig(
            dt=cfg.dt, horizon=2.0 * cfg.horizon, paths=cfg.paths, seed=cfg.seed,
            tail_mode=cfg.tail_mode, workers=cfg.workers, record_paths=cfg.record_paths,
        )
        traj = simulate(p, policy, cfg, observables)
    return traj, cfg


def _penalty_estimate(traj, Hc, Hm, cfg):
    m = traj.mean_path
    h = traj.times[1] - traj.times[0]
    rate = np.einsum("ti,ij,tj->t", m, Hm, m)
    mean_part = h * (rate.sum() - 0.5 * (rate[0] + rate[-1]))
    v = traj.observable_integrals[:, 0]
    se = float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return CostEstimate(float(v.mean() + mean_part), se, traj.times[-1])


def verify_value(p, sol, cfg=None):
    """Monte-Carlo cost under the optimal policy against x0^T Pi x0."""
    cfg = cfg or SimConfig()
    g = StabilizerGains(sol.policy.K, sol.policy.K_bar, "lmi")
    stab_ok = verify_stabilizer(p.system, g)
    Hc, Hm = _penalty_forms(p, sol.are, sol.policy)
    try:
        traj, used = _run(p, sol.policy, cfg, [Hc])
    except SimulationOverflow as exc:
        est = CostEstimate(np.inf, np.inf, cfg.horizon, None, True, np.nan, str(exc))
        return VerificationReport(est, np.inf, None, False, False)
    est = estimate_cost(p, sol.policy, used, traj)
    cs = _penalty_estimate(traj, Hc, Hm, used)
    gap = abs(est.value - sol.predicted_value)
    budget = 3.0 * est.std_error + VALUE_RTOL * abs(sol.predicted_value)
    ok = bool(stab_ok and not est.divergent)
    return VerificationReport(est, float(gap), cs, ok, bool(ok and gap <= budget), trajectory=traj)


def completion_of_squares_residual(p, sol, candidate, cfg=None):
    """Monte-Carlo sum of the two penalty integrals under ``candidate``.

    For a stabilizing candidate this equals J(candidate) - x0^T Pi x0. A
    candidate that fails verify_stabilizer is reported divergent.
    """
    cfg = cfg or SimConfig()
    if not verify_stabilizer(p.system, StabilizerGains(candidate.K, candidate.K_bar, "user")):
        return CostEstimate(np.inf, np.inf, cfg.horizon, None, True, np.nan, "candidate is not stabilizing")
    Hc, Hm = _penalty_forms(p, sol.are, candidate)
    try:
        traj, used = _run(p, candidate, cfg, [Hc])
    except SimulationOverflow as exc:
        return CostEstimate(np.inf, np.inf, cfg.horizon, None, True, np.nan, str(exc))
    return _penalty_estimate(traj, Hc, Hm, used)


def cost_and_penalty(p, sol, candidate, cfg=None):
    """Cost and penalty estimated on the same sample paths.

    Returns (cost estimate, penalty estimate, std error of cost - penalty).
    Sharing paths makes their difference nearly noise-free.
    """
    cfg = cfg or SimConfig()
    Hc, Hm = _penalty_forms(p, sol.are, candidate)
    traj, used = _run(p, candidate, cfg, [Hc])
    est = estimate_cost(p, candidate, used, traj)
    pen = _penalty_estimate(traj, Hc, Hm, used)
    d = traj.path_costs - traj.observable_integrals[:, 0]
    se = float(np.std(d, ddof=1) / np.sqrt(d.size)) if d.size > 1 else 0.0
    return est, pen, se
