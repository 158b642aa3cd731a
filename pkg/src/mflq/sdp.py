"""Dense primal barrier solver for small block-LMI problems.

Problems are posed as: minimize c^T x subject to F_b(x) = F0_b + sum_i x_i Fi_b >= 0
for every block b. Dual matrices are recovered as Z_b = mu * F_b(x)^{-1} at the
last centered point, so tr(Z_b Fi_b) summed over blocks matches c_i.
"""
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
MAX_ITER = "max_iter"
WEAKLY_FEASIBLE = "weakly_feasible"

UNBOUNDED_LEVEL = -1e12
PHASE1_NEWTON = 200


@dataclass
class LmiBlock:
    F0: np.ndarray
    Fi: np.ndarray  # shape (num_vars, order, order)

    def __post_init__(self):
        self.F0 = np.asarray(self.F0, dtype=float)
        self.Fi = np.asarray(self.Fi, dtype=float)
        if self.Fi.ndim == 2:
            self.Fi = self.Fi[None]
        N = self.F0.shape[0]
        if self.F0.shape != (N, N) or self.Fi.shape[1:] != (N, N):
            raise ValueError("block matrices must share one square order")

    @property
    def order(self):
        return self.F0.shape[0]

    @property
    def num_vars(self):
        return self.Fi.shape[0]

    def value(self, x):
        F = self.F0 + np.tensordot(x, self.Fi, axes=1)
        return 0.5 * (F + F.T)


@dataclass
class SdpProblem:
    c: np.ndarray
    blocks: list

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        for b in self.blocks:
            if b.num_vars != self.c.size:
                raise ValueError("every block needs one coefficient matrix per variable")

    @property
    def num_vars(self):
        return self.c.size


@dataclass
class SdpOptions:
    feas_tol: float = 1e-7
    gap_tol: float = 1e-7
    max_newton: int = 50
    max_outer: int = 60
    # box |x_i| <= bound used only inside phase 1 so its barrier stays bounded
    phase1_bound: float = 1e4


@dataclass
class SdpSolution:
    status: str
    x: np.ndarray
    objective: float
    dual_Z: list
    duality_gap: float
    min_eig_slack: float
    mu: float = float("nan")
    newton_steps: int = 0
    phase1_margin: float = float("nan")
    dual_infeasibility: float = float("nan")
    history: list = field(default_factory=list)


def sym_basis(n):
    """Orthonormal basis of symmetric n x n matrices (sqrt(2) off-diagonal scaling)."""
    mats = []
    for i in range(n):
        for j in range(i, n):
            E = np.zeros((n, n))
            if i == j:
                E[i, i] = 1.0
            else:
                E[i, j] = E[j, i] = 1.0 / np.sqrt(2.0)
            mats.append(E)
    return mats


def svec(M):
    n = M.shape[0]
    out = []
    for i in range(n):
        for j in range(i, n):
            out.append(M[i, i] if i == j else np.sqrt(2.0) * M[i, j])
    return np.array(out)


def smat(v, n):
    M = np.zeros((n, n))
    k = 0
    for i in range(n):
        for j in range(i, n):
            if i == j:
                M[i, i] = v[k]
            else:
                M[i, j] = M[j, i] = v[k] / np.sqrt(2.0)
            k += 1
    return M


class VariableLayout:
    """Named matrix variables packed into one scalar vector.

    Symmetric variables use the svec basis; general ones are stored row-major.
    """

    def __init__(self):
        self.slots = {}
        self.size = 0

    def add_symmetric(self, name, n):
        k = n * (n + 1) // 2
        self.slots[name] = ("sym", n, n, self.size, k)
        self.size += k

    def add_general(self, name, rows, cols):
        k = rows * cols
        self.slots[name] = ("gen", rows, cols, self.size, k)
        self.size += k

    def add_scalar(self, name):
        self.slots[name] = ("scalar", 1, 1, self.size, 1)
        self.size += 1

    def unpack(self, x):
        out = {}
        for name, (kind, r, c, start, k) in self.slots.items():
            chunk = x[start:start + k]
            if kind == "sym":
                out[name] = smat(chunk, r)
            elif kind == "gen":
                out[name] = chunk.reshape(r, c).copy()
            else:
                out[name] = float(chunk[0])
        return out

    def pack(self, values):
        x = np.zeros(self.size)
        for name, (kind, r, c, start, k) in self.slots.items():
            v = values[name]
            if kind == "sym":
                x[start:start + k] = svec(np.asarray(v))
            elif kind == "gen":
                x[start:start + k] = np.asarray(v).reshape(-1)
            else:
                x[start] = float(v)
        return x

    def affine_block(self, build):
        """LMI block from an affine function of the unpacked variables.

        The function is evaluated at zero and at every basis vector; because it
        is affine this recovers F0 and each Fi exactly.
        """
        zero = np.zeros(self.size)
        F0 = np.asarray(build(self.unpack(zero)), dtype=float)
        Fi = np.empty((self.size,) + F0.shape)
        for i in range(self.size):
            e = zero.copy()
            e[i] = 1.0
            Fi[i] = np.asarray(build(self.unpack(e)), dtype=float) - F0
        F0 = 0.5 * (F0 + F0.T)
        Fi = 0.5 * (Fi + np.transpose(Fi, (0, 2, 1)))
        return LmiBlock(F0, Fi)

    def linear_objective(self, fn):
        zero = np.zeros(self.size)
        base = float(fn(self.unpack(zero)))
        c = np.empty(self.size)
        for i in range(self.size):
            e = zero.copy()
            e[i] = 1.0
            c[i] = float(fn(self.unpack(e))) - base
        return c


def _cholesky(F):
    try:
        return np.linalg.cholesky(F)
    except np.linalg.LinAlgError:
        return None


class _Barrier:
    """Log-det barrier over dense blocks plus an optional diagonal (linear) part."""

    def __init__(self, blocks, lin_h0=None, lin_H=None):
        self.blocks = blocks
        self.lin_h0 = lin_h0
        self.lin_H = lin_H
        self.total_order = sum(b.order for b in blocks) + (0 if lin_h0 is None else lin_h0.size)

    def factors(self, x):
        out = []
        for b in self.blocks:
            L = _cholesky(b.value(x))
            if L is None:
                return None
            out.append(L)
        if self.lin_h0 is not None:
            s = self.lin_h0 + self.lin_H @ x
            if np.any(s <= 0):
                return None
            out.append(s)
        return out

    def value(self, x, facs):
        total = 0.0
        for L in facs[: len(self.blocks)]:
            total -= 2.0 * np.sum(np.log(np.diag(L)))
        if self.lin_h0 is not None:
            total -= np.sum(np.log(facs[-1]))
        return total

    def derivatives(self, x, facs):
        """Barrier gradient and a square-root factor J with Hessian = J^T J."""
        k = x.size
        grad = np.zeros(k)
        rows = []
        for b, L in zip(self.blocks, facs):
            Linv = sla.solve_triangular(L, np.eye(b.order), lower=True)
            G = Linv @ b.Fi @ Linv.T  # (k, N, N), each symmetric
            grad -= np.trace(G, axis1=1, axis2=2)
            rows.append(G.reshape(k, -1).T)
        if self.lin_h0 is not None:
            s = facs[-1]
            Hs = self.lin_H / s[:, None]
            grad -= Hs.sum(axis=0)
            rows.append(Hs)
        return grad, np.vstack(rows)

    def duals(self, x, mu, dx=None):
        """Dual matrices mu F^{-1} (I - dF F^{-1}) with dF the Newton step image.

        Including the pending Newton step makes tr(Z Fi) = c_i hold up to the
        accuracy of the linear solve instead of the centering error.
        """
        Z = []
        for b in self.blocks:
            F = b.value(x)
            Finv = np.linalg.inv(F)
            Zi = mu * Finv
            if dx is not None:
                dF = np.tensordot(dx, b.Fi, axes=1)
                Zi = Zi - mu * Finv @ dF @ Finv
            Z.append(0.5 * (Zi + Zi.T))
        lin = None
        if self.lin_h0 is not None:
            lin = mu / (self.lin_h0 + self.lin_H @ x)
        return Z, lin


def _newton_direction(grad, jac):
    """Solve (J^T J) dx = -grad through a QR factor of the column-scaled J.

    Working with J instead of J^T J halves the exponent of the condition
    number, which matters once mu is small and F(x) nearly singular.
    """
    d = np.sqrt(np.maximum(np.einsum("ij,ij->j", jac, jac), 1e-300))
    Js = jac / d
    gs = grad / d
    R = np.linalg.qr(Js, mode="r")
    try:
        w = sla.solve_triangular(R, -gs, trans="T", check_finite=False)
        step = sla.solve_triangular(R, w, check_finite=False)
        if not np.all(np.isfinite(step)):
            raise np.linalg.LinAlgError("non-finite Newton step")
    except (np.linalg.LinAlgError, ValueError):
        step = -np.linalg.lstsq(Js.T @ Js, gs, rcond=1e-14)[0]
    dec2 = float(-gs @ step)
    return step / d, max(dec2, 0.0)


def _center(c, barrier, x, mu, opts):
    """Damped Newton minimization of c^T x / mu + barrier(x).

    Returns the point, step count, last decrement, last Newton direction and
    an optional failure status.
    """
    facs = barrier.factors(x)
    steps = 0
    dec = np.inf
    prev = np.inf
    dx = np.zeros_like(x)
    while steps < opts.max_newton:
        grad, hess = barrier.derivatives(x, facs)
        grad = grad + c / mu
        dx, dec2 = _newton_direction(grad, hess)
        dec = np.sqrt(dec2)
        if dec < 1e-9 or (dec < 1e-4 and dec > 0.5 * prev):
            break
        prev = dec
        # self-concordance: 1/(1+dec) keeps the iterate interior and decreases the barrier
        alpha = 1.0 if dec < 0.25 else 1.0 / (1.0 + dec)
        while True:
            xn = x + alpha * dx
            fn = barrier.factors(xn)
            if fn is not None:
                break
            alpha *= 0.5
            if alpha < 1e-14:
                break
        steps += 1
        if fn is None:
            break
        x, facs = xn, fn
        if c @ x < UNBOUNDED_LEVEL:
            return x, steps, dec, dx, UNBOUNDED
    if steps >= opts.max_newton or not np.isfinite(dec):
        grad, hess = barrier.derivatives(x, facs)
        dx, dec2 = _newton_direction(grad + c / mu, hess)
        dec = np.sqrt(dec2)
    return x, steps, dec, dx, (None if dec < 1e-3 else MAX_ITER)


def _path_follow(c, barrier, x, opts, mu0, target_mu):
    mu = mu0
    total_steps = 0
    history = []
    status = None
    for outer in range(opts.max_outer):
        x, steps, dec, dx, status = _center(c, barrier, x, mu, opts)
        total_steps += steps
        history.append((mu, float(c @ x), steps, float(dec)))
        if status is not None:
            return x, mu, dx, total_steps, history, status
        if mu <= target_mu:
            return x, mu, dx, total_steps, history, None
        mu = max(mu / 10.0, target_mu * 0.999999)
    return x, mu, dx, total_steps, history, MAX_ITER


def _phase1(blocks, opts, x_start=None):
    """Maximize t subject to F(x) - t I >= 0, t <= 1, |x_i| <= bound."""
    k = blocks[0].num_vars if blocks else 0
    x = np.zeros(k) if x_start is None else np.asarray(x_start, dtype=float).copy()
    lam = min(np.linalg.eigvalsh(b.value(x))[0] for b in blocks)
    t0 = min(lam - 1.0, 0.0)
    aug = []
    for b in blocks:
        I = np.eye(b.order)
        aug.append(LmiBlock(b.F0, np.concatenate([b.Fi, -I[None]], axis=0)))
    bound = opts.phase1_bound
    # linear part: 1 - t >= 0 and bound -+ x_i >= 0
    h0 = np.concatenate([[1.0], np.full(2 * k, bound)])
    H = np.zeros((1 + 2 * k, k + 1))
    H[0, k] = -1.0
    H[1:k + 1, :k] = -np.eye(k)
    H[k + 1:, :k] = np.eye(k)
    barrier = _Barrier(aug, h0, H)
    c = np.zeros(k + 1)
    c[k] = -1.0
    z = np.concatenate([x, [t0]])
    target = opts.gap_tol / barrier.total_order * 0.1
    # the first center can sit far out near the box, which takes many damped steps
    p1_opts = replace(opts, max_newton=max(opts.max_newton, PHASE1_NEWTON))
    z, mu, _, steps, hist, status = _path_follow(c, barrier, z, p1_opts, 1.0 + abs(t0), target)
    return z[:k], float(z[k]), status, steps


def check_strict_feasibility(blocks, opts=None):
    """Phase-1 test. Returns (feasible, margin, x)."""
    opts = opts or SdpOptions()
    x, t, status, _ = _phase1(blocks, opts)
    if status == MAX_ITER:
        raise RuntimeError("phase 1 hit the iteration cap")
    return bool(t > opts.feas_tol), t, x


def _dual_residual(p, Z):
    resid = -p.c.copy()
    for b, Zb in zip(p.blocks, Z):
        resid += np.einsum("kij,ij->k", b.Fi, Zb)
    return resid


def _refine_duals(p, x, mu, Z):
    """Least-squares correction of Z on the near-null eigenspace of each F_b(x).

    Near the optimum the small eigenvalues of F(x) carry a relative error that
    mu F^{-1} amplifies. Restricting the correction to those directions keeps
    F(x) Z small while restoring tr(Z Fi) = c_i.
    """
    cutoff = np.sqrt(mu)
    bases = []
    cols = []
    for b in p.blocks:
        w, V = np.linalg.eigh(b.value(x))
        Va = V[:, w <= cutoff]
        r = Va.shape[1]
        basis = [Va @ E @ Va.T for E in sym_basis(r)] if r else []
        bases.append(basis)
        for M in basis:
            col = np.zeros(p.num_vars)
            # contribution of this basis matrix to every dual equation
            col[:] = np.einsum("kij,ij->k", b.Fi, M)
            cols.append(col)
    if not cols:
        return None
    G = np.array(cols).T
    y = np.linalg.lstsq(G, -_dual_residual(p, Z), rcond=1e-12)[0]
    out = []
    k = 0
    for Zb, basis in zip(Z, bases):
        Zn = Zb.copy()
        for M in basis:
            Zn += y[k] * M
            k += 1
        out.append(0.5 * (Zn + Zn.T))
    return out


def _finish(p, barrier, x, mu, status, steps, history, margin, dx=None):
    if np.isfinite(mu):
        candidates = [barrier.duals(x, mu)[0], barrier.duals(x, mu, dx)[0]]
        refined = _refine_duals(p, x, mu, candidates[0]) if mu > 0 else None
        if refined is not None and min(np.linalg.eigvalsh(z)[0] for z in refined) >= -mu:
            candidates.append(refined)
        Z = min(candidates, key=lambda zs: np.abs(_dual_residual(p, zs)).sum())
    else:
        Z = [np.zeros((b.order, b.order)) for b in p.blocks]
    gap = float(p.c @ x + sum(np.sum(b.F0 * Zb) for b, Zb in zip(p.blocks, Z)))
    dual_inf = float(np.abs(_dual_residual(p, Z)).sum())
    slack = min(float(np.linalg.eigvalsh(b.value(x))[0]) for b in p.blocks)
    return SdpSolution(
        status=status,
        x=x,
        objective=float(p.c @ x),
        dual_Z=Z,
        duality_gap=gap,
        min_eig_slack=slack,
        mu=mu,
        newton_steps=steps,
        phase1_margin=margin,
        dual_infeasibility=dual_inf,
        history=history,
    )


def solve(p, opts=None, x_start=None):
    """Minimize c^T x over the block LMI.

    A strictly feasible starting point comes from phase 1 unless one is given.
    """
    opts = opts or SdpOptions()
    k = p.num_vars
    if x_start is not None and all(_cholesky(b.value(x_start)) is not None for b in p.blocks):
        x0 = np.asarray(x_start, dtype=float).copy()
        margin = min(float(np.linalg.eigvalsh(b.value(x0))[0]) for b in p.blocks)
        p1_steps = 0
    else:
        x0, margin, st, p1_steps = _phase1(p.blocks, opts)
        if st == MAX_ITER and margin <= opts.feas_tol:
            return _finish(p, _Barrier(p.blocks), x0, float("nan"), MAX_ITER, p1_steps, [], margin)
    if margin < -opts.feas_tol:
        return _finish(p, _Barrier(p.blocks), x0, float("nan"), INFEASIBLE, p1_steps, [], margin)
    if margin <= opts.feas_tol:
        # no interior: solve the problem with every block relaxed by delta
        delta = max(10.0 * opts.feas_tol, 2.0 * abs(margin))
        relaxed = SdpProblem(p.c, [LmiBlock(b.F0 + delta * np.eye(b.order), b.Fi) for b in p.blocks])
        inner = solve(relaxed, opts, x_start=x0)
        inner.status = WEAKLY_FEASIBLE if inner.status == OPTIMAL else inner.status
        inner.phase1_margin = margin
        return inner
    barrier = _Barrier(p.blocks)
    if not np.any(p.c):
        # pure feasibility: the phase-1 point already certifies it
        sol = _finish(p, barrier, x0, 0.0, OPTIMAL, p1_steps, [], margin)
        return sol
    target = opts.gap_tol / barrier.total_order
    mu0 = 1.0 + abs(float(p.c @ x0))
    x, mu, dx, steps, history, status = _path_follow(p.c, barrier, x0, opts, mu0, target)
    sol = _finish(p, barrier, x, mu, status or OPTIMAL, steps + p1_steps, history, margin, dx)
    if sol.status == OPTIMAL and (sol.duality_gap > opts.gap_tol * (1 + abs(sol.objective)) or sol.dual_infeasibility > opts.feas_tol):
        sol.status = MAX_ITER
    return sol


def dump_problem_text(p, stream):
    """Sparse listing: one 'block i j var value' line per nonzero (var 0 is F0)."""
    stream.write("objective " + " ".join(repr(float(v)) for v in p.c) + "\n")
    for bi, b in enumerate(p.blocks):
        mats = [b.F0] + list(b.Fi)
        for vi, M in enumerate(mats):
            rows, cols = np.nonzero(np.triu(M))
            for i, j in zip(rows, cols):
                stream.write(f"{bi} {i} {j} {vi} {float(M[i, j])!r}\n")
