"""Result files for a pipeline run.

Everything written here except ``timing.csv`` and the figures is a pure
function of the configuration, so two runs with the same seed produce
byte-identical trajectory, metrics and plot-data files.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .evaluate import align_first, write_trajectory
from .pipeline import RunResult

TRAJECTORY = "trajectory.txt"
DENSE_TRAJECTORY = "trajectory_dense.txt"
METRICS = "metrics.jsonl"
TIMING = "timing.csv"
PLOT_DATA = "plot_data.csv"
MAP_DUMP = "map_planes.txt"


def _clean(value):
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if np.isfinite(v) else None
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def metrics_lines(result: RunResult) -> list[str]:
    """One JSON object per frame, then the summary record."""
    rows = [rec.as_dict() for rec in result.metrics.frames]
    rows.append(result.metrics.summary())
    return [json.dumps({k: _clean(v) for k, v in row.items()}, sort_keys=True) for row in rows]


def plot_rows(result: RunResult) -> np.ndarray:
    """Columns ``time x y z err`` (err is NaN without ground truth)."""
    t = result.translations
    err = np.full(len(t), np.nan)
    if result.truth is not None and len(t):
        R_gt, t_gt = result.truth.poses(result.stamps)
        _, t_al = align_first(result.rotations, t, R_gt[0], t_gt[0])
        err = np.linalg.norm(t_al - t_gt, axis=1)
    return np.column_stack([result.stamps, t, err])


def write_outputs(result: RunResult, out_dir, *, dense_traj=False, dump_map=False) -> dict:
    """Write the run's files into ``out_dir``; returns ``{name: path}``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    paths["trajectory"] = out / TRAJECTORY
    write_trajectory(paths["trajectory"], result.stamps, result.rotations, result.translations)

    if dense_traj and result.dense is not None:
        paths["dense"] = out / DENSE_TRAJECTORY
        write_trajectory(paths["dense"], *result.dense)

    paths["metrics"] = out / METRICS
    paths["metrics"].write_text("".join(line + "\n" for line in metrics_lines(result)))

    paths["timing"] = out / TIMING
    m = result.metrics
    with open(paths["timing"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "t_end", "frame_time", "estimate_time", "efficiency"])
        for rec, ft, et in zip(m.frames, m.frame_time, m.estimate_time):
            w.writerow([rec.index, f"{rec.t_end:.6f}", f"{ft:.6e}", f"{et:.6e}", f"{ft / m.dt:.6e}"])

    paths["plot_data"] = out / PLOT_DATA
    with open(paths["plot_data"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "x", "y", "z", "err"])
        for row in plot_rows(result):
            w.writerow([f"{row[0]:.6f}"] + [f"{v:.9f}" for v in row[1:4]]
                       + ["" if np.isnan(row[4]) else f"{row[4]:.9f}"])

    if dump_map:
        paths["map"] = out / MAP_DUMP
        result.voxel_map.export_planes(paths["map"])
    return paths
