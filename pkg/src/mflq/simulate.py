"""Monte-Carlo simulation of the closed-loop mean-field SDE.

Under u = K (X - E X) + K_bar E X the mean m = E X solves the linear ODE
m' = F m with F = A + A_bar + (B + B_bar) K_bar. It is advanced with the exact
RK4 step matrix, so the mean path carries no sampling noise. The centered
state Z = X - m solves

    dZ = (A + B K) Z dt + [(C + D K) Z + G m] dW,   Z(0) = 0,

with G = C + C_bar + (D + D_bar) K_bar. Sample paths are Euler-Maruyama on Z
and X = m + Z. Because E Z = 0 is built in, the empirical mean of X only
carries Monte-Carlo noise around the mean path.

Paths are processed in fixed blocks of BLOCK paths. Block b draws its
increments from a Philox stream keyed by (seed, b), one full row of BLOCK
normals per step, so every path sees the same noise whatever the path count
or worker count. Block results are reduced in block order.
"""
import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .matkit import sym

BLOCK = 2048
# steps of normals drawn per generator call
CHUNK = 64
OVERFLOW_LEVEL = 1e12
TAIL_MODES = ("truncate", "geometric_extrapolate")


class SimulationOverflow(OverflowError):
    """A state norm exceeded OVERFLOW_LEVEL."""

    def __init__(self, time, level):
        super().__init__(f"state norm {level:.3g} exceeded {OVERFLOW_LEVEL:g} at t = {time:.6g}")
        self.time = time
        self.level = level


@dataclass(frozen=True)
class FeedbackPolicy:
    """u = K (X - E X) + K_bar E X."""

    K: np.ndarray
    K_bar: np.ndarray

    def __post_init__(self):
        for name in ("K", "K_bar"):
            arr = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            object.__setattr__(self, name, arr)
        if self.K.shape != self.K_bar.shape:
            raise ValueError("K and K_bar must have the same shape")

    @classmethod
    def zero(cls, m, n):
        return cls(np.zeros((m, n)), np.zeros((m, n)))


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    horizon: float = 20.0
    paths: int = 10_000
    seed: int = 0
    tail_mode: str = "truncate"
    workers: int = None
    # recorded sample paths (taken from the first block) and grid stride
    record_paths: int = 8
    record_stride: int = None

    def __post_init__(self):
        if not (self.dt > 0 and np.isfinite(self.dt)):
            raise ValueError("dt must be positive")
        if not (self.horizon > 0 and np.isfinite(self.horizon)):
            raise ValueError("horizon must be positive")
        if self.dt > self.horizon:
            raise ValueError("dt must not exceed the horizon")
        if int(self.paths) != self.paths or self.paths < 1:
            raise ValueError("paths must be a positive integer")
        if int(self.seed) != self.seed or not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.tail_mode not in TAIL_MODES:
            raise ValueError(f"tail_mode must be one of {TAIL_MODES}")
        if self.workers is not None and self.workers < 1:
            raise ValueError("workers must be positive")
        if not 0 <= self.record_paths <= BLOCK:
            raise ValueError(f"record_paths must lie in [0, {BLOCK}]")
        if self.record_stride is not None and self.record_stride < 1:
            raise ValueError("record_stride must be positive")

    @property
    def steps(self):
        return max(1, int(round(self.horizon / self.dt)))

    @property
    def step(self):
        """Step actually used: the horizon split into whole steps."""
        return self.horizon / self.steps

    @property
    def stride(self):
        if self.record_stride is not None:
            return self.record_stride
        return max(1, self.steps // 2000)


@dataclass
class Trajectory:
    times: np.ndarray
    mean_path: np.ndarray
    mean_controls: np.ndarray
    record_times: np.ndarray
    sample_states: np.ndarray
    sample_controls: np.ndarray
    brownian_increments: np.ndarray
    # per grid point: path average of Z and of Z Z^T
    centered_mean: np.ndarray
    centered_second: np.ndarray
    running_cost_mean: np.ndarray
    path_costs: np.ndarray
    final_centered: np.ndarray
    observable_integrals: np.ndarray = None
    seed: int = 0
    paths: int = 0

    @property
    def empirical_mean(self):
        return self.mean_path + self.centered_mean

    @property
    def empirical_cov(self):
        mu = self.centered_mean
        return self.centered_second - mu[:, :, None] * mu[:, None, :]

    @property
    def second_moment(self):
        """Path average of |X|^2 per grid point."""
        m = self.mean_path
        return (
            np.einsum("ij,ij->i", m, m)
            + 2.0 * np.einsum("ij,ij->i", m, self.centered_mean)
            + np.trace(self.centered_second, axis1=1, axis2=2)
        )


@dataclass
class CostEstimate:
    value: float
    std_error: float
    horizon_used: float
    tail_bound: float = None
    divergent: bool = False
    decay_rate: float = float("nan")
    note: str = ""

    def to_dict(self):
        return {
            "value": self.value,
            "std_error": self.std_error,
            "horizon_used": self.horizon_used,
            "tail_bound": self.tail_bound,
            "divergent": self.divergent,
            "decay_rate": self.decay_rate,
            "note": self.note,
        }


def rk4_matrix(F, h):
    """One classical RK4 step for x' = F x, as a matrix."""
    n = F.shape[0]
    hF = h * F
    hF2 = hF @ hF
    return np.eye(n) + hF + hF2 / 2.0 + hF2 @ hF / 6.0 + hF2 @ hF2 / 24.0


def block_generator(seed, block):
    return np.random.Generator(np.random.Philox(key=int(seed) + (int(block) << 64)))


def brownian_increments(cfg, path_index, steps=None):
    """Regenerate the scaled increments seen by one path."""
    steps = cfg.steps if steps is None else steps
    block, col = divmod(int(path_index), BLOCK)
    rng = block_generator(cfg.seed, block)
    out = np.empty(steps)
    done = 0
    while done < steps:
        take = min(CHUNK, steps - done)
        out[done:done + take] = rng.standard_normal((take, BLOCK))[:, col]
        done += take
    return out * np.sqrt(cfg.step)


def _closed_loop(p, policy):
    s, c = p.system, p.cost
    K, Kb = policy.K, policy.K_bar
    if K.shape != (s.m, s.n):
        raise ValueError(f"policy gains have shape {K.shape}, expected {(s.m, s.n)}")
    F = s.A_sum + s.B_sum @ Kb
    Acl = s.A + s.B @ K
    Ccl = s.C + s.D @ K
    G = s.C_sum + s.D_sum @ Kb
    # running cost as Z^T Mq Z + 2 Z^T (Lq m) + m^T Nq m
    Mq = sym(c.Q + K.T @ c.R @ K)
    Lq = c.Q + K.T @ c.R @ Kb
    Nq = sym(c.Q_sum + Kb.T @ c.R_sum @ Kb)
    return F, Acl, Ccl, G, Mq, Lq, Nq


def mean_path(p, policy, cfg):
    F = p.system.A_sum + p.system.B_sum @ policy.K_bar
    Phi = rk4_matrix(F, cfg.step)
    m = np.empty((cfg.steps + 1, p.system.n))
    m[0] = p.x0
    for j in range(cfg.steps):
        m[j + 1] = Phi @ m[j]
        if not np.all(np.abs(m[j + 1]) < OVERFLOW_LEVEL):
            raise SimulationOverflow((j + 1) * cfg.step, float(np.max(np.abs(m[j + 1]))))
    return m


def _run_block(b, k, cfg, m, loop, observables, record):
    F, Acl, Ccl, G, Mq, Lq, Nq = loop
    n = m.shape[1]
    steps, h = cfg.steps, cfg.step
    sq = np.sqrt(h)
    rng = block_generator(cfg.seed, b)
    nobs = len(observables)
    # paths run along the second axis so per-path arithmetic is contiguous
    step_mat = np.vstack([np.eye(n) + h * Acl, Ccl])
    form_mat = np.vstack([Mq] + list(observables))
    gm = (m @ G.T)[:, :, None]
    lm = 2.0 * (m @ Lq.T)
    cm = np.einsum("ij,jk,ik->i", m, Nq, m)
    ones = np.ones(k)

    Z = np.zeros((n, k))
    sums = np.zeros((steps + 1, n))
    second = np.zeros((steps + 1, n, n))
    cost_sum = np.zeros(steps + 1)
    cost_sum[0] = cm[0] * k
    # trapezoid sums: interior points count once, end points half
    acc = np.full(k, 0.5 * cm[0])
    obs_acc = np.zeros((nobs, k))
    rec_paths, stride = record
    rec = [] if rec_paths else None
    incs = np.empty((rec_paths, steps)) if rec_paths else None
    if rec_paths:
        rec.append(Z[:, :rec_paths].T.copy())
    j = 0
    q = oq = None
    while j < steps:
        take = min(CHUNK, steps - j)
        noise = rng.standard_normal((take, BLOCK))[:, :k] * sq
        if rec_paths:
            incs[:, j:j + take] = noise[:, :rec_paths].T
        for r in range(take):
            Y = step_mat @ Z
            Z = Y[:n] + (Y[n:] + gm[j]) * noise[r]
            j += 1
            Y = form_mat @ Z
            q = np.einsum("ij,ij->j", Y[:n], Z) + lm[j] @ Z + cm[j]
            acc += q
            if nobs:
                oq = np.einsum("icp,cp->ip", Y[n:].reshape(nobs, n, k), Z)
                obs_acc += oq
            sums[j] = Z @ ones
            second[j] = Z @ Z.T
            cost_sum[j] = q @ ones
            if rec_paths and j % stride == 0:
                rec.append(Z[:, :rec_paths].T.copy())
        level = np.max(np.abs(Z)) if k else 0.0
        if not level < OVERFLOW_LEVEL:
            raise SimulationOverflow(j * h, float(level))
    acc -= 0.5 * q
    if nobs:
        obs_acc -= 0.5 * oq
    out = {
        "sums": sums,
        "second": second,
        "cost_sum": cost_sum,
        "path_costs": h * acc,
        "final": Z.T.copy(),
        "obs": (h * obs_acc).T,
    }
    if rec_paths:
        out["rec"] = np.array(rec)
        out["incs"] = incs
    return out


def simulate(p, policy, cfg, observables=()):
    """Simulate the closed loop.

    ``observables`` is an optional list of symmetric n x n matrices H; the
    per-path integrals of Z^T H Z over [0, T] are returned in
    ``observable_integrals``.
    """
    loop = _closed_loop(p, policy)
    observables = [sym(H) for H in observables]
    m = mean_path(p, policy, cfg)
    steps, n = cfg.steps, p.system.n
    nblocks = -(-cfg.paths // BLOCK)
    sizes = [min(BLOCK, cfg.paths - b * BLOCK) for b in range(nblocks)]
    rec_paths = min(cfg.record_paths, sizes[0])
    stride = cfg.stride

    def work(b):
        record = (rec_paths, stride) if b == 0 else (0, stride)
        return _run_block(b, sizes[b], cfg, m, loop, observables, record)

    workers = cfg.workers or os.cpu_count() or 1
    if workers == 1 or nblocks == 1:
        results = [work(b) for b in range(nblocks)]
    else:
        with ThreadPoolExecutor(max_workers=min(workers, nblocks)) as pool:
            results = list(pool.map(work, range(nblocks)))

    sums = results[0]["sums"].copy()
    second = results[0]["second"].copy()
    cost_sum = results[0]["cost_sum"].copy()
    for res in results[1:]:
        sums += res["sums"]
        second += res["second"]
        cost_sum += res["cost_sum"]
    P = cfg.paths
    times = np.arange(steps + 1) * cfg.step
    record_idx = np.arange(0, steps + 1, stride)
    Kb, K = policy.K_bar, policy.K
    ubar = m @ Kb.T
    if rec_paths:
        Zr = results[0]["rec"]
        Xr = m[record_idx][:, None, :] + Zr
        Ur = ubar[record_idx][:, None, :] + Zr @ K.T
        incs = results[0]["incs"]
    else:
        Xr = np.zeros((record_idx.size, 0, n))
        Ur = np.zeros((record_idx.size, 0, K.shape[0]))
        incs = np.zeros((0, steps))
    return Trajectory(
        times=times,
        mean_path=m,
        mean_controls=ubar,
        record_times=times[record_idx],
        sample_states=Xr,
        sample_controls=Ur,
        brownian_increments=incs,
        centered_mean=sums / P,
        centered_second=second / P,
        running_cost_mean=cost_sum / P,
        path_costs=np.concatenate([r["path_costs"] for r in results]),
        final_centered=np.concatenate([r["final"] for r in results]),
        observable_integrals=np.concatenate([r["obs"] for r in results]) if observables else None,
        seed=cfg.seed,
        paths=P,
    )


def _decay_fit(times, curve):
    """Least-squares exponential rate over the last 20% of the curve."""
    start = int(0.8 * (len(times) - 1))
    t, y = times[start:], curve[start:]
    if np.max(y) <= 0:
        return -np.inf
    keep = y > 0
    if keep.sum() < 2:
        return -np.inf
    slope = np.polyfit(t[keep], np.log(y[keep]), 1)[0]
    return float(slope)


def estimate_cost(p, policy, cfg, traj=None):
    """Monte-Carlo cost over [0, T] with an optional geometric tail."""
    try:
        traj = simulate(p, policy, cfg) if traj is None else traj
    except SimulationOverflow as exc:
        return CostEstimate(np.inf, np.inf, cfg.horizon, None, True, np.nan, str(exc))
    costs = traj.path_costs
    value = float(np.mean(costs))
    se = float(np.std(costs, ddof=1) / np.sqrt(costs.size)) if costs.size > 1 else 0.0
    rate = _decay_fit(traj.times, traj.running_cost_mean)
    divergent = bool(rate >= 0)
    tail = None
    if cfg.tail_mode == "geometric_extrapolate" and not divergent:
        tail = float(traj.running_cost_mean[-1] / -rate) if np.isfinite(rate) else 0.0
        value += tail
    note = "running cost does not decay" if divergent else ""
    return CostEstimate(value, se, cfg.horizon, tail, divergent, rate, note)


def cost_rate_forms(cost, X, U):
    """Path-averaged running cost in both forms at one time.

    X (paths x n) and U (paths x m) are samples; the expectation is their
    empirical mean. Returns (uncentered, centered).
    """
    mx, mu = X.mean(axis=0), U.mean(axis=0)
    Zx, Zu = X - mx, U - mu
    raw = (
        np.mean(np.einsum("ij,jk,ik->i", X, cost.Q, X)) + mx @ cost.Q_bar @ mx
        + np.mean(np.einsum("ij,jk,ik->i", U, cost.R, U)) + mu @ cost.R_bar @ mu
    )
    centered = (
        np.mean(np.einsum("ij,jk,ik->i", Zx, cost.Q, Zx)) + mx @ cost.Q_sum @ mx
        + np.mean(np.einsum("ij,jk,ik->i", Zu, cost.R, Zu)) + mu @ cost.R_sum @ mu
    )
    return float(raw), float(centered)


def _trapezoid(values, h):
    return float(h * (values.sum() - 0.5 * (values[0] + values[-1])))


def ito_identity_check(p, M, N, policy, cfg, t):
    """Monte-Carlo check of the quadratic Ito identity at time t.

    For Z = X - E X, m = E X and the policy's controls, the identity reads

      E int_0^t [ Z^T (A^T M + M A + C^T M C) Z + 2 (u - Eu)^T (B^T M + D^T M C) Z
                  + (u - Eu)^T D^T M D (u - Eu) + g^T M g
                  + m^T ((A+A_bar)^T N + N (A+A_bar)) m + 2 m^T N (B+B_bar) Eu ] ds
        = E Z(t)^T M Z(t) + m(t)^T N m(t) - x^T N x

    with g = (C+C_bar) m + (D+D_bar) Eu. Returns (residual, std_error), both
    normalized by 1 + |RHS|.
    """
    if not 0 < t <= cfg.horizon:
        raise ValueError("t must lie in (0, horizon]")
    s = p.system
    M, N = sym(M), sym(N)
    K, Kb = policy.K, policy.K_bar
    sub = SimConfig(
        dt=cfg.step, horizon=t, paths=cfg.paths, seed=cfg.seed,
        workers=cfg.workers, record_paths=0,
    )
    cross = (s.B.T @ M + s.D.T @ M @ s.C)
    H = s.A.T @ M + M @ s.A + s.C.T @ M @ s.C + K.T @ cross + cross.T @ K + K.T @ s.D.T @ M @ s.D @ K
    traj = simulate(p, policy, sub, observables=[H])
    m = traj.mean_path
    ubar = traj.mean_controls
    g = m @ s.C_sum.T + ubar @ s.D_sum.T
    Fm = s.A_sum.T @ N + N @ s.A_sum
    det_rate = (
        np.einsum("ij,jk,ik->i", g, M, g)
        + np.einsum("ij,jk,ik->i", m, Fm, m)
        + 2.0 * np.einsum("ij,jk,ik->i", m, N @ s.B_sum, ubar)
    )
    det_lhs = _trapezoid(det_rate, sub.step)
    Zt = traj.final_centered
    zmz = np.einsum("ij,jk,ik->i", Zt, M, Zt)
    diff = traj.observable_integrals[:, 0] - zmz
    rhs = float(np.mean(zmz) + m[-1] @ N @ m[-1] - p.x0 @ N @ p.x0)
    lhs = float(np.mean(traj.observable_integrals[:, 0]) + det_lhs)
    scale = 1.0 + abs(rhs)
    se = float(np.std(diff, ddof=1) / np.sqrt(diff.size)) if diff.size > 1 else 0.0
    return abs(lhs - rhs) / scale, se / scale


def ito_identity_residual(p, M, N, policy, cfg, t):
    return ito_identity_check(p, M, N, policy, cfg, t)[0]


def dump_csv(traj, stream):
    """Write the mean path (path_id -1) and the recorded paths as CSV rows."""
    n = traj.mean_path.shape[1]
    m = traj.mean_controls.shape[1]
    w = csv.writer(stream)
    w.writerow(["time", "path_id"] + [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(m)])
    for j, t in enumerate(traj.times):
        w.writerow([repr(float(t)), -1] + [repr(float(v)) for v in traj.mean_path[j]]
                   + [repr(float(v)) for v in traj.mean_controls[j]])
    for i in range(traj.sample_states.shape[1]):
        for j, t in enumerate(traj.record_times):
            w.writerow([repr(float(t)), i] + [repr(float(v)) for v in traj.sample_states[j, i]]
                       + [repr(float(v)) for v in traj.sample_controls[j, i]])
