"""Static SVG charts of averaged estimation error.

Rendering goes through ``matplotlib.figure.Figure`` directly so no global
pyplot state is touched, and SVG ids and dates are pinned so identical curves
give identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
import numpy as np
from matplotlib.figure import Figure

from .harness import MetricsSummary

_LABELS = {
    4: ["x [m]", "y [m]", "xdot [m/s]", "ydot [m/s]"],
    8: ["x_b [m]", "y_b [m]", "theta_b [rad]", "x_t [m]", "y_t [m]", "xdot_b [m/s]", "ydot_b [m/s]", "thetadot_b [rad/s]"],
}
_HILQE = dict(color="tab:blue", linestyle="-", linewidth=1.4, label="HiLQE")
_SKF = dict(color="tab:red", linestyle="--", linewidth=1.4, label="SKF")


def state_labels(n: int) -> list[str]:
    return _LABELS.get(n, [f"x{j}" for j in range(n)])


def _save(fig: Figure, path: Path) -> None:
    with matplotlib.rc_context({"svg.hashsalt": "hilqe", "svg.fonttype": "path"}):
        fig.savefig(path, format="svg", metadata={"Date": None})


def _finite_ylim(ax, *curves) -> None:
    vals = np.concatenate([np.asarray(c, dtype=float).ravel() for c in curves])
    vals = vals[np.isfinite(vals)]
    top = float(vals.max()) if vals.size else 0.0
    ax.set_ylim(0.0, top * 1.05 if top > 0 else 1.0)


def render_plots(summary: MetricsSummary, out_dir) -> list[Path]:
    """Write ``error_magnitude.svg`` and ``error_per_state.svg``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t = summary.t

    fig = Figure(figsize=(6.4, 3.6))
    ax = fig.add_subplot()
    ax.plot(t, summary.mean_err_hilqe, **_HILQE)
    ax.plot(t, summary.mean_err_skf, **_SKF)
    _finite_ylim(ax, summary.mean_err_hilqe, summary.mean_err_skf)
    ax.set_xlim(t[0], t[-1])
    ax.set_xlabel("time [s]")
    ax.set_ylabel("mean error magnitude")
    ax.legend(loc="upper right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    p_mag = out / "error_magnitude.svg"
    _save(fig, p_mag)

    n = summary.dim_err_hilqe.shape[1]
    cols = 2 if n <= 4 else 4
    rows = int(np.ceil(n / cols))
    fig = Figure(figsize=(3.2 * cols, 2.4 * rows))
    labels = state_labels(n)
    for j in range(n):
        ax = fig.add_subplot(rows, cols, j + 1)
        ax.plot(t, summary.dim_err_hilqe[:, j], **_HILQE)
        ax.plot(t, summary.dim_err_skf[:, j], **_SKF)
        _finite_ylim(ax, summary.dim_err_hilqe[:, j], summary.dim_err_skf[:, j])
        ax.set_xlim(t[0], t[-1])
        ax.set_title(labels[j], fontsize=9)
        ax.set_xlabel("time [s]", fontsize=8)
        ax.set_ylabel("mean abs. error", fontsize=8)
        ax.tick_params(labelsize=7)
        ax.grid(alpha=0.3)
    fig.axes[0].legend(fontsize=7, loc="upper right")
    fig.tight_layout()
    p_dim = out / "error_per_state.svg"
    _save(fig, p_dim)
    return [p_mag, p_dim]
