"""Stabilizability tests and stabilizer synthesis for the mean-field system.

A gain pair (K, K_bar) acts as u = K (X - E X) + K_bar E X. The mean then
follows x' = (A + A_bar + (B + B_bar) K_bar) x and the centered part is an
ordinary linear SDE driven by (A + B K, C + D K) plus a forcing term
(C + C_bar + (D + D_bar) K_bar) E X in the diffusion.

Synthesis runs in two convex stages: first a Lyapunov LMI for the mean pair
gives K_bar, then with K_bar frozen the centered inequality is linear in
(X, Y) and gives K.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from . import sdp
from .matkit import SingularOperatorError, lambda_min, pinv, solve_lyapunov_linear, sym

log = logging.getLogger(__name__)

TRUE, FALSE, UNKNOWN = "true", "false", "unknown"

RANGE_TOL = 1e-8
# rank tolerance for the PBH test on the mean pair
PBH_TOL = 1e-9
# spectral-norm cap on Y_bar in the mean-pair LMI, relative to X_bar <= I
GAIN_BOUND = 10.0


@dataclass(frozen=True)
class StabilizerGains:
    K: np.ndarray
    K_bar: np.ndarray
    provenance: str = "user"

    def __post_init__(self):
        for name in ("K", "K_bar"):
            arr = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            object.__setattr__(self, name, arr)
        if self.K.shape != self.K_bar.shape:
            raise ValueError("K and K_bar must have the same shape")
        if self.provenance not in ("lmi", "pseudoinverse", "user"):
            raise ValueError(f"unknown provenance {self.provenance!r}")


@dataclass
class LmiResult:
    """Outcome of one phase-1 LMI solve."""

    feasible: bool
    margin: float
    X: np.ndarray = None
    Y: np.ndarray = None
    K: np.ndarray = None


@dataclass
class StabilizabilityReport:
    mf_l2_stabilizable: str
    l2_stabilizable: str
    gains: StabilizerGains = None
    lmi_witness: dict = None
    criteria_fired: list = field(default_factory=list)
    reason: str = ""
    l2_gain: np.ndarray = None

    def to_dict(self):
        out = {
            "mf_l2_stabilizable": self.mf_l2_stabilizable,
            "l2_stabilizable": self.l2_stabilizable,
            "criteria_fired": list(self.criteria_fired),
            "reason": self.reason,
        }
        if self.gains is not None:
            out["gains"] = {
                "K": self.gains.K.tolist(),
                "K_bar": self.gains.K_bar.tolist(),
                "provenance": self.gains.provenance,
            }
        if self.lmi_witness is not None:
            out["lmi_witness"] = {k: v.tolist() for k, v in self.lmi_witness.items()}
        if self.l2_gain is not None:
            out["l2_gain"] = self.l2_gain.tolist()
        return out


def _gain(X, Y):
    """K with K X = Y for symmetric positive definite X."""
    return np.linalg.solve(X, Y.T).T


def _phase1(blocks):
    opts = sdp.SdpOptions()
    try:
        ok, margin, x = sdp.check_strict_feasibility(blocks, opts)
    except RuntimeError as exc:
        log.debug("phase 1 failed: %s", exc)
        return False, float("nan"), None
    return ok, margin, x


def mean_pair_lmi(F, G, gain_bound=GAIN_BOUND):
    """Find X_bar > 0, Y_bar with F X_bar + X_bar F^T + G Y_bar + Y_bar^T G^T < 0.

    X_bar is kept below the identity and the spectral norm of Y_bar below
    ``gain_bound`` so the phase-1 margin measures robustness rather than
    scale, and the extracted gain stays moderate.
    """
    F = np.atleast_2d(F)
    G = np.atleast_2d(G)
    n, m = G.shape
    lay = sdp.VariableLayout()
    lay.add_symmetric("X", n)
    lay.add_general("Y", m, n)
    eye = np.eye(n)

    def lyap(v):
        M = F @ v["X"] + G @ v["Y"]
        return -(M + M.T)

    def norm_box(v):
        return np.block([[gain_bound * eye, v["Y"].T], [v["Y"], gain_bound * np.eye(m)]])

    blocks = [
        lay.affine_block(lyap),
        lay.affine_block(lambda v: v["X"]),
        lay.affine_block(lambda v: eye - v["X"]),
        lay.affine_block(norm_box),
    ]
    ok, margin, x = _phase1(blocks)
    if x is None:
        return LmiResult(False, margin)
    v = lay.unpack(x)
    X = sym(v["X"])
    res = LmiResult(bool(ok), float(margin), X, v["Y"])
    if ok:
        res.K = _gain(X, v["Y"])
    return res


def centered_lmi(A, B, C, D, forcing=None, normalize=True):
    """Classic mean-square stabilizability LMI for dX = (A+BK)X dt + (C+DK)X dW.

    Finds X > 0, Y with
        [[A X + X A^T + B Y + Y^T B^T + forcing, C X + D Y],
         [(C X + D Y)^T,                          -X      ]] < 0.
    A constant PSD ``forcing`` term adds the frozen mean-driven diffusion.
    """
    A, B, C, D = (np.atleast_2d(M) for M in (A, B, C, D))
    n, m = B.shape
    lay = sdp.VariableLayout()
    lay.add_symmetric("X", n)
    lay.add_general("Y", m, n)
    extra = np.zeros((n, n)) if forcing is None else sym(forcing)

    def big(v):
        X, Y = v["X"], v["Y"]
        top = A @ X + B @ Y
        off = C @ X + D @ Y
        return -np.block([[top + top.T + extra, off], [off.T, -X]])

    blocks = [lay.affine_block(big), lay.affine_block(lambda v: v["X"])]
    if normalize:
        eye = np.eye(n)
        blocks.append(lay.affine_block(lambda v: eye - v["X"]))
    ok, margin, x = _phase1(blocks)
    if x is None:
        return LmiResult(False, margin)
    v = lay.unpack(x)
    X = sym(v["X"])
    res = LmiResult(bool(ok), float(margin), X, v["Y"])
    if ok:
        res.K = _gain(X, v["Y"])
    return res


def ode_pair_stabilizable(sys):
    """Mean pair [A+A_bar; B+B_bar] through the Lyapunov LMI."""
    return mean_pair_lmi(sys.A_sum, sys.B_sum)


def sde_pair_stabilizable(sys):
    """Centered pair [A, C; B, D] through the classic stochastic LMI."""
    return centered_lmi(sys.A, sys.B, sys.C, sys.D)


def pbh_uncontrollable_modes(F, G, tol=PBH_TOL):
    """Eigenvalues of F with nonnegative real part that G cannot move."""
    F = np.atleast_2d(F)
    G = np.atleast_2d(G)
    n = F.shape[0]
    bad = []
    scale = 1.0 + np.linalg.norm(F) + np.linalg.norm(G)
    for lam in np.linalg.eigvals(F):
        if lam.real < 0:
            continue
        M = np.hstack([lam * np.eye(n) - F, G.astype(complex)])
        sv = np.linalg.svd(M, compute_uv=False)
        if sv[-1] <= tol * scale:
            bad.append(complex(lam))
    return bad


def verify_stabilizer(sys, g):
    """True iff (K, K_bar) makes state and control square-integrable.

    Checks the mean matrix A + A_bar + (B + B_bar) K_bar is Hurwitz, then
    requires positive definite solutions of the coupled Lyapunov pair
        F X_bar + X_bar F^T + I = 0,
        (A+BK)^T X + X (A+BK) + (C+DK)^T X (C+DK) + G^T X_bar G + I = 0
    with G = C + C_bar + (D + D_bar) K_bar.
    """
    K, Kb = g.K, g.K_bar
    F = sys.A_sum + sys.B_sum @ Kb
    if np.max(np.linalg.eigvals(F).real) >= 0:
        return False
    n = sys.n
    try:
        Xb = solve_lyapunov_linear(F.T, None, np.eye(n))
        G = sys.C_sum + sys.D_sum @ Kb
        X = solve_lyapunov_linear(sys.A + sys.B @ K, sys.C + sys.D @ K, np.eye(n) + G.T @ Xb @ G)
    except SingularOperatorError:
        return False
    return bool(lambda_min(Xb) > 0 and lambda_min(X) > 0)


def pseudoinverse_stabilizer(sys):
    """Stabilizer that cancels the mean-driven diffusion, or None.

    Requires range(C+C_bar) inside range(D+D_bar). Then
    K_bar = -(D+D_bar)^+ (C+C_bar) + (I - (D+D_bar)^+ (D+D_bar)) K_tilde
    zeroes C + C_bar + (D + D_bar) K_bar, and K_tilde only has to stabilize
    the reduced mean ODE.
    """
    Ds, Cs = sys.D_sum, sys.C_sum
    pres = pinv(Ds)
    Dp = pres.pinv
    leak = np.linalg.norm((np.eye(sys.n) - Ds @ Dp) @ Cs)
    if leak > RANGE_TOL:
        log.info("range condition fails: residual %.3g", leak)
        return None
    proj = np.eye(sys.m) - Dp @ Ds
    F = sys.A_sum - sys.B_sum @ Dp @ Cs
    G = sys.B_sum @ proj
    stage1 = mean_pair_lmi(F, G)
    if not stage1.feasible:
        log.info("reduced mean ODE not stabilizable (margin %.3g)", stage1.margin)
        return None
    K_bar = -Dp @ Cs + proj @ stage1.K
    stage2 = sde_pair_stabilizable(sys)
    if not stage2.feasible:
        log.info("centered pair LMI infeasible (margin %.3g)", stage2.margin)
        return None
    return StabilizerGains(stage2.K, K_bar, "pseudoinverse")


def _open_interval_of_negative(coefs):
    """Open set {k : p(k) < 0} for a polynomial of degree <= 2, as a list of intervals."""
    c2, c1, c0 = coefs
    inf = np.inf
    if c2 == 0.0:
        if c1 == 0.0:
            return [(-inf, inf)] if c0 < 0 else []
        root = -c0 / c1
        return [(-inf, root)] if c1 > 0 else [(root, inf)]
    disc = c1 * c1 - 4.0 * c2 * c0
    if c2 > 0:
        if disc <= 0:
            return []
        s = np.sqrt(disc)
        r = sorted(((-c1 - s) / (2 * c2), (-c1 + s) / (2 * c2)))
        return [(r[0], r[1])]
    if disc <= 0:
        # concave and never touches zero from above except possibly one point
        return [(-inf, inf)] if disc < 0 else [(-inf, -c1 / (2 * c2)), (-c1 / (2 * c2), inf)]
    s = np.sqrt(disc)
    r = sorted(((-c1 - s) / (2 * c2), (-c1 + s) / (2 * c2)))
    return [(-inf, r[0]), (r[1], inf)]


def _pick(lo, hi):
    if np.isinf(lo) and np.isinf(hi):
        return 0.0
    if np.isinf(lo):
        return hi - 1.0
    if np.isinf(hi):
        return lo + 1.0
    return 0.5 * (lo + hi)


def scalar_single_gain_stabilizer(sys):
    """Exact search for one k with K = K_bar = k on a scalar system.

    The closed loop is stable iff a+a_bar+(b+b_bar)k < 0 and either
    2(a+bk)+(c+dk)^2 < 0 or c+c_bar+(d+d_bar)k = 0. Returns k or None.
    """
    a, ab, b, bb = sys.A[0, 0], sys.A_bar[0, 0], sys.B[0, 0], sys.B_bar[0, 0]
    c, cb, d, db = sys.C[0, 0], sys.C_bar[0, 0], sys.D[0, 0], sys.D_bar[0, 0]
    mean_set = _open_interval_of_negative((0.0, b + bb, a + ab))
    if not mean_set:
        return None
    quad = _open_interval_of_negative((d * d, 2.0 * (b + c * d), 2.0 * a + c * c))
    for lo1, hi1 in mean_set:
        for lo2, hi2 in quad:
            lo, hi = max(lo1, lo2), min(hi1, hi2)
            if lo < hi:
                return float(_pick(lo, hi))
        # points where the mean-driven diffusion vanishes
        if d + db != 0.0:
            k = -(c + cb) / (d + db)
            if lo1 < k < hi1:
                return float(k)
        elif c + cb == 0.0:
            return float(_pick(lo1, hi1))
    return None


def _l2_verdict(sys, candidates):
    if sys.n == 1 and sys.m == 1:
        k = scalar_single_gain_stabilizer(sys)
        if k is None:
            return FALSE, None, "scalar_exact"
        return TRUE, np.array([[k]]), "scalar_exact"
    for K in candidates:
        if K is not None and verify_stabilizer(sys, StabilizerGains(K, K, "user")):
            return TRUE, K, "candidate_gain"
    return UNKNOWN, None, "no_candidate"


def check_mf_stabilizable(sys):
    """Two-stage stabilizability test with verified gain extraction."""
    fired = []
    bad_modes = pbh_uncontrollable_modes(sys.A_sum, sys.B_sum)
    stage1 = ode_pair_stabilizable(sys)
    if bad_modes:
        fired.append("mean_pair_necessity")
        return StabilizabilityReport(
            FALSE, FALSE, criteria_fired=fired,
            reason="ODE pair [A+A_bar;B+B_bar] not stabilizable",
        )
    if not stage1.feasible:
        fired.append("mean_pair_lmi_failed")
        return StabilizabilityReport(
            UNKNOWN, UNKNOWN, criteria_fired=fired,
            reason=f"mean-pair LMI margin {stage1.margin:.3g} below tolerance",
        )
    fired.append("mean_pair_lmi")
    K_bar = stage1.K
    G = sys.C_sum + sys.D_sum @ K_bar
    stage2 = centered_lmi(sys.A, sys.B, sys.C, sys.D, forcing=G @ stage1.X @ G.T, normalize=False)
    if not stage2.feasible:
        fired.append("centered_lmi_failed")
        l2, k2, tag = _l2_verdict(sys, [K_bar])
        fired.append(tag)
        if l2 == TRUE:
            # a single stabilizing gain is also a mean-field stabilizer
            return StabilizabilityReport(
                TRUE, TRUE, StabilizerGains(k2, k2, "lmi"), None, fired, "", k2,
            )
        return StabilizabilityReport(
            UNKNOWN, l2, criteria_fired=fired,
            reason=f"centered LMI margin {stage2.margin:.3g} below tolerance",
        )
    fired.append("centered_lmi")
    gains = StabilizerGains(stage2.K, K_bar, "lmi")
    witness = {"X": stage2.X, "X_bar": stage1.X, "Y": stage2.Y, "Y_bar": stage1.Y}
    if not verify_stabilizer(sys, gains):
        fired.append("verification_failed")
        return StabilizabilityReport(
            UNKNOWN, UNKNOWN, criteria_fired=fired, lmi_witness=witness,
            reason="extracted gains failed closed-loop verification",
        )
    fired.append("verified")
    l2, k2, tag = _l2_verdict(sys, [stage2.K, K_bar])
    fired.append(tag)
    return StabilizabilityReport(TRUE, l2, gains, witness, fired, "", k2)
