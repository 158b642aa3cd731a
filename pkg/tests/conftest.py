import json
import sys
from pathlib import Path

import numpy as np
import pytest

from mflq.model import CostWeights, MfLqProblem, SystemMatrices, load_problem

DATA = Path(__file__).parent / "data"


def data_path(name):
    return str(DATA / name)


def printed(name):
    with open(DATA / "benchmark5_printed.json") as fh:
        return np.array(json.load(fh)[name])


def scalar_problem(a=0.0, a_bar=0.0, b=0.0, b_bar=0.0, c=0.0, c_bar=0.0, d=0.0, d_bar=0.0,
                   q=1.0, q_bar=0.0, r=1.0, r_bar=0.0, x0=1.0):
    s = SystemMatrices.build(
        1, 1, A=[[a]], A_bar=[[a_bar]], B=[[b]], B_bar=[[b_bar]],
        C=[[c]], C_bar=[[c_bar]], D=[[d]], D_bar=[[d_bar]],
    )
    return MfLqProblem(s, CostWeights([[q]], [[q_bar]], [[r]], [[r_bar]]), [x0])


def random_problem(rng, n=3, m=2, noise=0.3):
    """Open-loop stable system; with PSD weights every standing assumption holds."""
    A = rng.normal(size=(n, n)) - 3 * np.eye(n)
    Ab = 0.5 * rng.normal(size=(n, n))
    A = A - max(0.0, np.max(np.linalg.eigvals(A + Ab).real) + 1) * np.eye(n)
    s = SystemMatrices(
        A, Ab, rng.normal(size=(n, m)), 0.5 * rng.normal(size=(n, m)),
        noise * rng.normal(size=(n, n)), noise * rng.normal(size=(n, n)),
        noise * rng.normal(size=(n, m)), noise * rng.normal(size=(n, m)),
    )
    return s


def psd(rng, n, rank=None):
    G = rng.normal(size=(n, rank or n))
    return G @ G.T


@pytest.fixture(scope="session")
def bench():
    return load_problem(data_path("benchmark5.json"))


@pytest.fixture(scope="session")
def bench_sol(bench):
    from mflq.control import SolveOptions, solve_mflq

    return solve_mflq(bench, SolveOptions(skip_verify=True))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines):
        terminalreporter.write_line(line)
