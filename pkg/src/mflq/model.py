"""Problem data for mean-field LQ control and its JSON problem file."""
import json
from dataclasses import dataclass, field

import numpy as np

from .matkit import lambda_min, sym

MATRIX_KEYS = ("A", "A_bar", "B", "B_bar", "C", "C_bar", "D", "D_bar")
WEIGHT_KEYS = ("Q", "Q_bar", "R", "R_bar")
FILE_KEYS = ("n", "m") + MATRIX_KEYS + WEIGHT_KEYS + ("x0",)

# Relative asymmetry tolerated before symmetrizing a weight. Looser than a
# pure round-off bound so that hand-typed weights with a slipped digit load.
ASYMMETRY_LIMIT = 1e-3


class ProblemFileError(ValueError):
    """Base class for problem-file failures."""


class ParseError(ProblemFileError):
    pass


class DimensionError(ProblemFileError):
    pass


class NonFiniteError(ProblemFileError):
    pass


def _matrix(value, rows, cols, name):
    arr = np.array(value, dtype=float, ndmin=2)
    if arr.shape != (rows, cols):
        raise DimensionError(f"{name} has shape {arr.shape}, expected {(rows, cols)}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} has non-finite entries")
    return arr


@dataclass(frozen=True)
class SystemMatrices:
    A: np.ndarray
    A_bar: np.ndarray
    B: np.ndarray
    B_bar: np.ndarray
    C: np.ndarray
    C_bar: np.ndarray
    D: np.ndarray
    D_bar: np.ndarray

    def __post_init__(self):
        n, m = self.n, self.m
        for key in MATRIX_KEYS:
            rows, cols = (n, n) if key[0] in "AC" else (n, m)
            object.__setattr__(self, key, _matrix(getattr(self, key), rows, cols, key))

    @property
    def n(self):
        return np.atleast_2d(self.A).shape[0]

    @property
    def m(self):
        return np.atleast_2d(self.B).shape[1]

    # sums that appear in every mean equation
    @property
    def A_sum(self):
        return self.A + self.A_bar

    @property
    def B_sum(self):
        return self.B + self.B_bar

    @property
    def C_sum(self):
        return self.C + self.C_bar

    @property
    def D_sum(self):
        return self.D + self.D_bar

    @classmethod
    def build(cls, n, m, **given):
        """Fill unspecified matrices with zeros."""
        out = {}
        for key in MATRIX_KEYS:
            shape = (n, n) if key[0] in "AC" else (n, m)
            out[key] = np.zeros(shape) if given.get(key) is None else given[key]
        return cls(**out)


@dataclass(frozen=True)
class CostWeights:
    Q: np.ndarray
    Q_bar: np.ndarray
    R: np.ndarray
    R_bar: np.ndarray

    def __post_init__(self):
        for key in WEIGHT_KEYS:
            object.__setattr__(self, key, sym(np.atleast_2d(np.asarray(getattr(self, key), dtype=float))))

    @property
    def Q_sum(self):
        return self.Q + self.Q_bar

    @property
    def R_sum(self):
        return self.R + self.R_bar

    def shifted(self, eps):
        n = self.Q.shape[0]
        return CostWeights(self.Q + eps * np.eye(n), self.Q_bar + eps * np.eye(n), self.R, self.R_bar)


@dataclass(frozen=True)
class MfLqProblem:
    system: SystemMatrices
    cost: CostWeights
    x0: np.ndarray

    def __post_init__(self):
        n, m = self.system.n, self.system.m
        x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if x0.shape != (n,):
            raise DimensionError(f"x0 has length {x0.size}, expected {n}")
        if not np.all(np.isfinite(x0)):
            raise NonFiniteError("x0 has non-finite entries")
        object.__setattr__(self, "x0", x0)
        for key in WEIGHT_KEYS:
            size = n if key.startswith("Q") else m
            _matrix(getattr(self.cost, key), size, size, key)

    def with_x0(self, x0):
        return MfLqProblem(self.system, self.cost, np.asarray(x0, dtype=float))


@dataclass
class AssumptionReport:
    holds_J: bool
    holds_J_prime: bool
    holds_J_star: bool
    min_eigs: dict
    holds_S: bool
    ode_pair_stabilizable: bool
    sde_pair_stabilizable: bool
    notes: list = field(default_factory=list)

    def to_dict(self):
        return {
            "holds_J": self.holds_J,
            "holds_J_prime": self.holds_J_prime,
            "holds_J_star": self.holds_J_star,
            "min_eigs": dict(self.min_eigs),
            "holds_S": self.holds_S,
            "ode_pair_stabilizable": self.ode_pair_stabilizable,
            "sde_pair_stabilizable": self.sde_pair_stabilizable,
            "notes": list(self.notes),
        }


def _symmetric_weight(value, size, name):
    arr = _matrix(value, size, size, name)
    gap = np.max(np.abs(arr - arr.T)) if size > 1 else 0.0
    if gap > ASYMMETRY_LIMIT * (1.0 + np.max(np.abs(arr))):
        raise ProblemFileError(f"{name} is not symmetric (max |M - M^T| = {gap:.3g})")
    return sym(arr)


def problem_from_dict(data):
    if not isinstance(data, dict):
        raise ParseError("problem file must hold a JSON object")
    missing = [k for k in FILE_KEYS if k not in data]
    if missing:
        raise ParseError("missing fields: " + ", ".join(missing))
    try:
        n, m = int(data["n"]), int(data["m"])
    except (TypeError, ValueError) as exc:
        raise ParseError("n and m must be integers") from exc
    if n <= 0 or m <= 0 or n != data["n"] or m != data["m"]:
        raise ParseError("n and m must be positive integers")
    try:
        mats = {}
        for key in MATRIX_KEYS:
            rows, cols = (n, n) if key[0] in "AC" else (n, m)
            mats[key] = _matrix(data[key], rows, cols, key)
        weights = {}
        for key in WEIGHT_KEYS:
            weights[key] = _symmetric_weight(data[key], n if key.startswith("Q") else m, key)
        x0 = np.array(data["x0"], dtype=float).reshape(-1)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ProblemFileError):
            raise
        raise ParseError(f"malformed numeric data: {exc}") from exc
    return MfLqProblem(SystemMatrices(**mats), CostWeights(**weights), x0)


def load_problem(source):
    """Read a problem file from a path, a text/binary stream or raw bytes."""
    if isinstance(source, (bytes, bytearray)):
        raw = bytes(source)
    elif isinstance(source, str):
        with open(source, "rb") as fh:
            raw = fh.read()
    elif hasattr(source, "read"):
        raw = source.read()
    else:
        raise ParseError(f"cannot read problem from {type(source).__name__}")
    if isinstance(raw, bytes):
        try:
            raw = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError("problem file is not UTF-8") from exc
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}") from exc
    return problem_from_dict(data)


def problem_to_dict(p):
    s, c = p.system, p.cost
    out = {"n": s.n, "m": s.m}
    for key in MATRIX_KEYS:
        out[key] = getattr(s, key).tolist()
    for key in WEIGHT_KEYS:
        out[key] = getattr(c, key).tolist()
    out["x0"] = p.x0.tolist()
    return out


def dump_problem(p):
    """Serialize to JSON text; repr floats round-trip exactly."""
    return json.dumps(problem_to_dict(p), indent=1)


def check_assumptions(p, tol=1e-9):
    if tol <= 0:
        raise ValueError("tol must be positive")
    c = p.cost
    eig = {
        "Q": lambda_min(c.Q),
        "Q_sum": lambda_min(c.Q_sum),
        "R": lambda_min(c.R),
        "R_sum": lambda_min(c.R_sum),
    }
    r_ok = eig["R"] >= tol and eig["R_sum"] >= tol
    holds_J = eig["Q"] >= -tol and eig["Q_sum"] >= -tol and r_ok
    holds_J_prime = eig["Q"] >= tol and eig["Q_sum"] >= tol and r_ok
    holds_J_star = eig["Q"] >= -tol and eig["R"] >= tol
    notes = []
    for name, value in eig.items():
        if name.startswith("R") and value < tol:
            notes.append(f"lambda_min({name}) = {value:.3g} is not positive")
        if name.startswith("Q") and value < -tol:
            notes.append(f"lambda_min({name}) = {value:.3g} is negative")

    from .stabilize import ode_pair_stabilizable, sde_pair_stabilizable

    ode_ok = ode_pair_stabilizable(p.system).feasible
    sde_ok = sde_pair_stabilizable(p.system).feasible
    if not ode_ok:
        notes.append("ODE pair [A+A_bar; B+B_bar] not stabilizable")
    if not sde_ok:
        notes.append("SDE pair [A,C;B,D] stabilizability LMI infeasible")
    return AssumptionReport(
        holds_J=bool(holds_J),
        holds_J_prime=bool(holds_J_prime),
        holds_J_star=bool(holds_J_star),
        min_eigs=eig,
        holds_S=bool(ode_ok and sde_ok),
        ode_pair_stabilizable=bool(ode_ok),
        sde_pair_stabilizable=bool(sde_ok),
        notes=notes,
    )
