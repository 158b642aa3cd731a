"""Report serialization and figures for the command line."""
import json
import math
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1


def plain(obj):
    """Convert numpy containers and scalars to plain Python values."""
    if isinstance(obj, dict):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    return obj


def _num(x):
    # non-finite values have no JSON literal
    if not math.isfinite(x):
        return "null"
    return format(x, ".17g")


def _encode(obj, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(k)}: {_encode(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, list):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list)) for v in obj):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in obj) + "]"
        items = [pad + _encode(v, indent, level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, float):
        return _num(obj)
    if isinstance(obj, int):
        return str(obj)
    return json.dumps(obj)


def to_json(report):
    """JSON text with every float written to 17 significant digits."""
    return _encode(plain(report), 1, 0) + "\n"


def _flatten(obj, prefix, out):
    if isinstance(obj, dict):
        for k, v in obj.items():
            _flatten(v, f"{prefix}.{k}" if prefix else str(k), out)
    elif isinstance(obj, list):
        if not obj:
            out.append((prefix, "[]"))
        for i, v in enumerate(obj):
            _flatten(v, f"{prefix}.{i}", out)
    else:
        out.append((prefix, _encode(obj, 1, 0)))


def to_text(report):
    """Tab-delimited key-path/value lines derived from the JSON form."""
    rows = []
    _flatten(json.loads(to_json(report)), "", rows)
    return "".join(f"{k}\t{v}\n" for k, v in rows)


def figure_path(output, name):
    out = Path(output)
    return out.with_name(f"{out.stem}_{name}.png")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_trajectory(traj, path, title="closed loop"):
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    t = traj.times
    for i in range(traj.mean_path.shape[1]):
        axes[0].plot(t, traj.mean_path[:, i], label=f"E x{i + 1}")
    for i in range(traj.sample_states.shape[1]):
        axes[0].plot(traj.record_times, traj.sample_states[:, i, 0], color="0.6", lw=0.5)
    axes[0].set_xlabel("t")
    axes[0].set_title(f"{title}: mean path and sample paths (x1)")
    axes[0].legend(fontsize=7)
    axes[1].semilogy(t, np.maximum(traj.second_moment, 1e-300), label="E|X|^2")
    axes[1].semilogy(t, np.maximum(traj.running_cost_mean, 1e-300), label="running cost")
    axes[1].set_xlabel("t")
    axes[1].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_riccati_trace(trace, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(trace.times, [np.trace(P) for P in trace.P_path], label="tr P(s)")
    ax.plot(trace.times, [np.trace(P) for P in trace.Pi_path], label="tr Pi(s)")
    ax.set_xlabel("s")
    ax.set_title("Riccati flow from zero")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_matrices(mats, path):
    plt = _pyplot()
    fig, axes = plt.subplots(1, len(mats), figsize=(4 * len(mats), 3.6))
    axes = np.atleast_1d(axes)
    for ax, (name, M) in zip(axes, mats.items()):
        im = ax.imshow(np.atleast_2d(M), cmap="RdBu_r")
        ax.set_title(name)
        fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_mean_decay(F, x0, path, horizon=10.0):
    """|e^{F t} x0| on [0, horizon]."""
    from .simulate import rk4_matrix

    plt = _pyplot()
    t = np.linspace(0.0, horizon, 201)
    step = np.linalg.matrix_power(rk4_matrix(F, (t[1] - t[0]) / 10), 10)
    x = np.asarray(x0, dtype=float)
    norms = []
    for _ in t:
        norms.append(np.linalg.norm(x))
        x = step @ x
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(t, np.maximum(norms, 1e-300))
    ax.set_xlabel("t")
    ax.set_title("|E X(t)| under the mean dynamics")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
