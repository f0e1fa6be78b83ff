"""Trajectory files and absolute trajectory error."""
from __future__ import annotations

import numpy as np

from . import so3
from .errors import StreamFormatError


def rotation_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternions ``(x, y, z, w)`` with ``w >= 0``."""
    phi = so3.log_batch(np.asarray(R).reshape(-1, 3, 3))
    th = np.linalg.norm(phi, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        axis = np.where(th[:, None] > 1e-12, phi / th[:, None], 0.0)
    q = np.column_stack([axis * np.sin(th / 2)[:, None], np.cos(th / 2)])
    q[q[:, 3] < 0] *= -1
    return q


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(-1, 4)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w = q[:, 3]
    v = q[:, :3]
    s = np.linalg.norm(v, axis=1)
    th = 2 * np.arctan2(s, w)
    with np.errstate(invalid="ignore", divide="ignore"):
        phi = np.where(s[:, None] > 1e-15, v / s[:, None] * th[:, None], 2 * v)
    return so3.exp_batch(phi)


def format_tum(stamps, R, t) -> str:
    q = rotation_to_quat(R)
    lines = [f"{s:.6f} {x:.9f} {y:.9f} {z:.9f} {a:.9f} {b:.9f} {c:.9f} {d:.9f}"
             for s, (x, y, z), (a, b, c, d) in zip(stamps, t, q)]
    return "".join(line + "\n" for line in lines)


def write_trajectory(path, stamps, R, t) -> None:
    with open(path, "w") as fh:
        fh.write("# stamp tx ty tz qx qy qz qw\n")
        fh.write(format_tum(stamps, R, t))


def read_trajectory(path):
    """``(stamps, R (N,3,3), t (N,3))`` from a TUM-style text file."""
    try:
        a = np.loadtxt(path, comments="#", ndmin=2)
    except ValueError as exc:
        raise StreamFormatError(f"unreadable trajectory file: {exc}") from None
    if a.size == 0:
        return np.zeros(0), np.zeros((0, 3, 3)), np.zeros((0, 3))
    if a.shape[1] != 8:
        raise StreamFormatError("trajectory rows need 8 columns")
    return a[:, 0], quat_to_rotation(a[:, 4:]), a[:, 1:4]


def align_first(R_est, t_est, R_gt0, t_gt0):
    """Apply the rigid transform that maps the first estimate onto truth."""
    R_est = np.asarray(R_est)
    t_est = np.asarray(t_est)
    R_al = R_gt0 @ R_est[0].T
    t_al = t_gt0 - R_al @ t_est[0]
    return R_al @ R_est, t_est @ R_al.T + t_al


def translation_errors(stamps, R_est, t_est, truth) -> np.ndarray:
    """Per-pose translation error after first-pose alignment.

    ``truth`` is any object with ``poses(stamps) -> (R, t)``.
    """
    stamps = np.asarray(stamps, dtype=float)
    if len(stamps) < 2:
        raise ValueError("need at least two estimated poses")
    R_gt, t_gt = truth.poses(stamps)
    _, t_al = align_first(R_est, t_est, R_gt[0], t_gt[0])
    return np.linalg.norm(t_al - t_gt, axis=1)


def compute_ate(stamps, R_est, t_est, truth) -> float:
    """Translation RMSE after aligning by the first pose.

    The anchor pose is excluded: it is exact by construction and would only
    dilute the statistic.
    """
    err = translation_errors(stamps, R_est, t_est, truth)
    return float(np.sqrt(np.mean(err[1:] ** 2)))

