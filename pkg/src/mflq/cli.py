"""Command line: analyze, stabilize, solve, simulate and verify a problem file.

Exit codes: 0 success, 1 negative but well-posed verdict, 2 input error,
3 numerical failure.
"""
import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import report, riccati
from .control import METHODS, AssumptionGateError, CrossCheckError, SolveOptions, solve_mflq, verify_value
from .model import ProblemFileError, check_assumptions, load_problem
from .simulate import FeedbackPolicy, SimConfig, SimulationOverflow, dump_csv, estimate_cost, simulate
from .stability import classify
from .stabilize import TRUE, check_mf_stabilizable, pseudoinverse_stabilizer

EXIT_OK, EXIT_NEGATIVE, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("analyze", "stabilize", "solve", "simulate", "verify")

log = logging.getLogger("mflq")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="mflq", description=__doc__, allow_abbrev=False,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("subcommand", choices=COMMANDS)
    parser.add_argument("--input", required=True, help="problem file (JSON)")
    parser.add_argument("--output", default=None,
                        help="report path; figures are written next to it (default: stdout, no figures)")
    parser.add_argument("--format", choices=("json", "text"), default="json")
    parser.add_argument("--tol", type=float, default=1e-9, help="eigenvalue tolerance for assumption checks")
    parser.add_argument("--dt", type=float, default=1e-3, help="simulation step")
    parser.add_argument("--horizon", type=float, default=20.0, help="simulation horizon")
    parser.add_argument("--paths", type=int, default=10_000, help="Monte-Carlo paths")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--method", choices=METHODS, default="sdp")
    parser.add_argument("--epsilon", type=float, default=0.0, help="shift Q and Q_bar by epsilon*I")
    parser.add_argument("--workers", type=int, default=None, help="simulation threads (default: all CPUs)")
    return parser


def _sim_config(args):
    return SimConfig(dt=args.dt, horizon=args.horizon, paths=args.paths, seed=args.seed, workers=args.workers)


def _solution_dict(p, sol):
    are = sol.are
    out = {
        "P": are.P,
        "Pi": are.Pi,
        "Gamma": are.Gamma,
        "Gamma_bar": are.Gamma_bar,
        "residuals": are.residuals.to_dict(),
        "method": are.method,
        "solver_stats": are.stats,
        "predicted_value": sol.predicted_value,
    }
    if sol.ode is not None:
        out["ode"] = {
            "P": sol.ode.P,
            "Pi": sol.ode.Pi,
            "residuals": sol.ode.residuals.to_dict(),
            "converged_at": sol.ode_trace.converged_at,
        }
    if sol.cross_gap is not None:
        out["cross_method_gap"] = sol.cross_gap
    if are.sdp_solution is not None:
        out["dual_residual"] = riccati.dual_residuals(p.system, p.cost, are.sdp_solution)
    return out


def _analyze(p, args, figs):
    rep = check_assumptions(p, args.tol)
    verdict = classify(p.system, p.cost)
    if figs:
        report.plot_mean_decay(p.system.A_sum, p.x0, figs("mean_decay"))
    return {"assumptions": rep.to_dict(), "stability": verdict.to_dict()}, EXIT_OK


def _stabilize(p, args, figs):
    rep = check_mf_stabilizable(p.system)
    out = {"stabilizability": rep.to_dict()}
    pg = pseudoinverse_stabilizer(p.system)
    out["pseudoinverse_stabilizer"] = None if pg is None else {"K": pg.K, "K_bar": pg.K_bar}
    if figs and rep.gains is not None:
        F = p.system.A_sum + p.system.B_sum @ rep.gains.K_bar
        report.plot_mean_decay(F, p.x0, figs("mean_decay"))
    if rep.mf_l2_stabilizable != TRUE:
        print(f"not stabilizable: {rep.reason}", file=sys.stderr)
        return out, EXIT_NEGATIVE
    return out, EXIT_OK


def _solve(p, args, figs):
    opts = SolveOptions(method=args.method, tol=args.tol, epsilon=args.epsilon, skip_verify=True)
    sol = solve_mflq(p, opts)
    out = {"solution": _solution_dict(p, sol)}
    if args.epsilon > 0:
        _, rows = riccati.epsilon_trend(p.system, p.cost, args.epsilon)
        out["epsilon_trend"] = rows
    if figs:
        report.plot_matrices({"P": sol.are.P, "Pi": sol.are.Pi}, figs("solution"))
        if sol.ode_trace is not None:
            report.plot_riccati_trace(sol.ode_trace, figs("riccati_flow"))
    return out, EXIT_OK


def _simulate(p, args, figs):
    cfg = _sim_config(args)
    out = {}
    try:
        sol = solve_mflq(p, SolveOptions(method=args.method, tol=args.tol, epsilon=args.epsilon, skip_verify=True))
        policy = sol.policy
        out["policy"] = {"source": "optimal", "K": policy.K, "K_bar": policy.K_bar}
    except AssumptionGateError as exc:
        policy = FeedbackPolicy.zero(p.system.m, p.system.n)
        out["policy"] = {"source": "zero", "reason": str(exc), "K": policy.K, "K_bar": policy.K_bar}
    try:
        traj = simulate(p, policy, cfg)
    except SimulationOverflow as exc:
        out["overflow"] = {"time": exc.time, "level": exc.level}
        print(str(exc), file=sys.stderr)
        return out, EXIT_NEGATIVE
    est = estimate_cost(p, policy, cfg, traj)
    out["cost"] = est.to_dict()
    out["final_mean"] = traj.mean_path[-1]
    out["final_second_moment"] = float(traj.second_moment[-1])
    if figs:
        report.plot_trajectory(traj, figs("trajectory"))
        with open(figs("trajectory", ".csv"), "w", newline="") as fh:
            dump_csv(traj, fh)
    return out, (EXIT_NEGATIVE if est.divergent else EXIT_OK)


def _verify(p, args, figs):
    opts = SolveOptions(method=args.method, tol=args.tol, epsilon=args.epsilon, skip_verify=True)
    sol = solve_mflq(p, opts)
    ver = verify_value(p, sol, _sim_config(args))
    out = {"solution": _solution_dict(p, sol), "verification": ver.to_dict()}
    if figs and ver.trajectory is not None:
        report.plot_trajectory(ver.trajectory, figs("trajectory"))
    return out, (EXIT_OK if ver.within_budget else EXIT_NEGATIVE)


HANDLERS = {
    "analyze": _analyze,
    "stabilize": _stabilize,
    "solve": _solve,
    "simulate": _simulate,
    "verify": _verify,
}


def run(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        p = load_problem(args.input)
        _sim_config(args)
    except (ProblemFileError, OSError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    figs = None
    if args.output is not None:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)

        def figs(name, suffix=".png"):
            return report.figure_path(args.output, name).with_suffix(suffix)

    try:
        body, code = HANDLERS[args.subcommand](p, args, figs)
    except AssumptionGateError as exc:
        body, code = {"assumption_gate": {"failed": exc.failed, "report": exc.report.to_dict()}}, EXIT_NEGATIVE
        print(str(exc), file=sys.stderr)
    except (riccati.SdpFailure, riccati.ResidualCheckFailed, riccati.NoConvergenceError,
            riccati.SingularInnerMatrixError, CrossCheckError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    doc = {"schema_version": report.SCHEMA_VERSION, "command": args.subcommand, "exit_code": code}
    doc.update(body)
    text = report.to_json(doc) if args.format == "json" else report.to_text(doc)
    if args.output is None:
        sys.stdout.write(text)
    else:
        Path(args.output).write_text(text)
    return code


def main():
    logging.basicConfig(level=os.environ.get("MFLQ_LOG", "WARNING"))
    sys.exit(run())
