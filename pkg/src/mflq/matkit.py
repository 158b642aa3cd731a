"""Small dense kernels for symmetric matrices.

Everything here works on plain numpy arrays. Orders stay small (a few dozen
at most), so clarity wins over speed.
"""
from dataclasses import dataclass

import numpy as np


class SingularOperatorError(np.linalg.LinAlgError):
    """The Lyapunov operator has no unique solution."""


class EigenConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class PsdVerdict:
    is_psd: bool
    is_pd: bool
    lambda_min: float
    witness: np.ndarray


@dataclass(frozen=True)
class PinvResult:
    pinv: np.ndarray
    rank: int


def sym(M):
    """Return (M + M^T)/2, which is bitwise symmetric."""
    M = np.asarray(M, dtype=float)
    S = 0.5 * (M + M.T)
    # (a+b)/2 and (b+a)/2 agree in IEEE arithmetic, but copy the upper triangle anyway
    iu = np.triu_indices(S.shape[0], 1)
    S[(iu[1], iu[0])] = S[iu]
    return S


def eig_sym(M, tol=1e-15, max_sweeps=100):
    """Cyclic Jacobi eigensolver.

    Returns eigenvalues in ascending order and the matching orthonormal
    eigenvectors as columns.
    """
    a = sym(M).copy()
    n = a.shape[0]
    v = np.eye(n)
    if n == 1:
        return a.diagonal().copy(), v
    scale = max(np.linalg.norm(a), 1e-300)
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(a.diagonal()))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    # theta^2 would overflow; t -> 1/(2 theta)
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise EigenConvergenceError("Jacobi sweeps did not converge")
    w = a.diagonal().copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def lambda_min(M):
    return float(np.linalg.eigvalsh(sym(M))[0])


def psd_verdict(M, tol=1e-9):
    w, V = eig_sym(M)
    lam = float(w[0])
    return PsdVerdict(is_psd=lam >= -tol, is_pd=lam > tol, lambda_min=lam, witness=V[:, 0].copy())


def pinv(M, rcond_factor=1e-12):
    """Moore-Penrose inverse with the sigma_max * order * 1e-12 rank cutoff."""
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return PinvResult(np.zeros(M.T.shape), 0)
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    cutoff = (s[0] if s.size else 0.0) * max(M.shape) * rcond_factor
    keep = s > cutoff
    rank = int(np.count_nonzero(keep))
    inv_s = np.zeros_like(s)
    inv_s[keep] = 1.0 / s[keep]
    P = (Vt.T * inv_s) @ U.T
    if M.shape[0] == M.shape[1] and np.array_equal(M, M.T):
        P = sym(P)
    return PinvResult(P, rank)


def schur_psd(M, N, R, tol=1e-9):
    """PSD verdict on [[M, N], [N^T, R]] using Schur complements.

    Nonsingular R uses M - N R^{-1} N^T with R > 0. Singular R falls back to
    the generalized test: R >= 0, N (I - R R^+) = 0 and M - N R^+ N^T >= 0.
    """
    M = sym(M)
    R = sym(R)
    N = np.atleast_2d(np.asarray(N, dtype=float))
    full = np.block([[M, N], [N.T, R]])
    wr, _ = eig_sym(R)
    scale = 1.0 + np.linalg.norm(full)
    r_singular = abs(wr).min() <= tol * scale
    Rp = pinv(R).pinv
    comp = sym(M - N @ Rp @ N.T)
    wc, _ = eig_sym(comp)
    if not r_singular:
        is_psd = wr[0] > 0 and wc[0] >= -tol
        is_pd = wr[0] > tol and wc[0] > tol
    else:
        leak = np.linalg.norm(N @ (np.eye(R.shape[0]) - R @ Rp))
        is_psd = wr[0] >= -tol and leak <= tol * scale and wc[0] >= -tol
        is_pd = False
    # witness and lambda_min come from the assembled block so they are directly checkable
    wf, Vf = eig_sym(full)
    return PsdVerdict(is_psd=bool(is_psd), is_pd=bool(is_pd), lambda_min=float(wf[0]), witness=Vf[:, 0].copy())


def lyapunov_operator_matrix(A, C):
    """Matrix of P -> P A + A^T P + C^T P C acting on column-major vec(P)."""
    A = np.asarray(A, dtype=float)
    C = np.asarray(C, dtype=float)
    n = A.shape[0]
    eye = np.eye(n)
    # vec(P A) = (A^T kron I) vec P, vec(A^T P) = (I kron A^T) vec P, vec(C^T P C) = (C^T kron C^T) vec P
    return np.kron(A.T, eye) + np.kron(eye, A.T) + np.kron(C.T, C.T)


def solve_lyapunov_linear(A, C, Q, cond_limit=1e14):
    """Solve P A + A^T P + C^T P C + Q = 0 through the Kronecker operator."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    C = np.zeros((n, n)) if C is None else np.asarray(C, dtype=float)
    Q = sym(Q)
    L = lyapunov_operator_matrix(A, C)
    sv = np.linalg.svd(L, compute_uv=False)
    if sv[-1] <= sv[0] * 1e-13 or sv[0] / max(sv[-1], 1e-300) > cond_limit:
        raise SingularOperatorError("Lyapunov operator is singular")
    vecp = np.linalg.solve(L, -Q.reshape(-1, order="F"))
    P = sym(vecp.reshape((n, n), order="F"))
    return P


def lyapunov_residual(A, C, Q, P):
    return P @ A + A.T @ P + C.T @ P @ C + Q


def is_hurwitz(M, margin=0.0):
    return bool(np.max(np.linalg.eigvals(np.atleast_2d(M)).real) < -margin)


def spectral_abscissa(M):
    return float(np.max(np.linalg.eigvals(np.atleast_2d(M)).real))
