"""Figures for a finished run, rendered off-screen to PNG files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluate import align_first  # noqa: E402
from .outputs import plot_rows  # noqa: E402
from .pipeline import RunResult  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.dpi": 120,
}


def _trajectory(ax, result: RunResult):
    if result.truth is not None:
        R_gt, t_gt = result.truth.poses(result.stamps)
        ax.plot(t_gt[:, 0], t_gt[:, 1], color="0.5", lw=1.2, label="truth")
        _, est = align_first(result.rotations, result.translations, R_gt[0], t_gt[0])
    else:
        est = result.translations
    ax.plot(est[:, 0], est[:, 1], color="C0", lw=0.8, label="estimate")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(frameon=False)


def render_figures(result: RunResult, out_dir) -> list[Path]:
    """Write trajectory, error, timing and sampling plots; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    m = result.metrics
    rows = plot_rows(result)
    t_end = np.array([f.t_end for f in m.frames])
    written = []

    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 4))
        _trajectory(ax, result)
        ax.set_title("Trajectory (top view)")
        written.append(out / "trajectory.png")
        fig.savefig(written[-1], bbox_inches="tight")
        plt.close(fig)

        if not np.all(np.isnan(rows[:, 4])):
            fig, ax = plt.subplots(figsize=(6, 2.6))
            ax.plot(rows[:, 0], rows[:, 4], color="C3", lw=0.8)
            ax.set_xlabel("time [s]")
            ax.set_ylabel("translation error [m]")
            title = "Translation error"
            if m.ate_rmse is not None:
                title += f" (ATE {m.ate_rmse:.4f} m)"
            ax.set_title(title)
            written.append(out / "error.png")
            fig.savefig(written[-1], bbox_inches="tight")
            plt.close(fig)

        if len(m.frames):
            fig, ax = plt.subplots(figsize=(6, 2.6))
            ax.plot(t_end, m.frame_time / m.dt, color="C0", lw=0.6, label="total")
            ax.plot(t_end, m.estimate_time / m.dt, color="C1", lw=0.6, label="estimation")
            ax.axhline(1.0, color="0.4", ls="--", lw=0.8)
            ax.set_xlabel("time [s]")
            ax.set_ylabel("processing time / dt")
            ax.set_title(f"Efficiency (mean {m.efficiency:.3f})")
            ax.legend(frameon=False)
            written.append(out / "timing.png")
            fig.savefig(written[-1], bbox_inches="tight")
            plt.close(fig)

            fig, ax = plt.subplots(figsize=(6, 2.6))
            ax.plot(t_end, m.points_in, color="0.5", lw=0.8, label="points in")
            ax.plot(t_end, m.points_selected, color="C2", lw=0.8, label="selected")
            ax.set_xlabel("time [s]")
            ax.set_ylabel("points per frame")
            ax.set_title(f"Sampling ({100 * m.selected_fraction:.1f}% selected)")
            ax.legend(frameon=False)
            written.append(out / "sampling.png")
            fig.savefig(written[-1], bbox_inches="tight")
            plt.close(fig)
    return written
