"""Rotation-group helpers (SO(3) exp/log, skew, right Jacobian).

All functions accept single 3-vectors / 3x3 matrices; the ``*_batch``
variants take leading batch dimensions.
"""
from __future__ import annotations

import numpy as np

_SMALL = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_batch(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _rodrigues_coeffs(theta: np.ndarray):
    """Return (sin(θ)/θ, (1-cos θ)/θ²) with series limits near zero."""
    theta = np.asarray(theta, dtype=float)
    small = theta < _SMALL * 1e3
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(t)) / (t * t))
    return a, b


def exp_batch(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    a, b = _rodrigues_coeffs(theta)
    K = skew_batch(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def exp(phi) -> np.ndarray:
    """Rodrigues' formula: axis-angle vector to rotation matrix."""
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (3,) or not np.all(np.isfinite(phi)):
        raise ValueError("so3 exp expects a finite 3-vector")
    return exp_batch(phi)


def log(R, *, tol: float = 1e-6) -> np.ndarray:
    """Minimal axis-angle of a rotation matrix, ``|phi| <= pi``.

    At exactly ``pi`` the representative whose first nonzero component is
    non-negative is returned.

    Raises:
        ValueError: if ``R`` is not orthonormal with det +1 within ``tol``.
    """
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise ValueError("so3 log expects a finite 3x3 matrix")
    resid = np.linalg.norm(R.T @ R - np.eye(3))
    if resid > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError(f"matrix is not a rotation (orthonormality residual {resid:.3g})")

    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if cos_t > 1.0 - 1e-10:
        # first-order: R ~ I + [phi]x
        return 0.5 * w
    if cos_t < -0.99:
        # near pi the antisymmetric part vanishes; recover the axis from the
        # symmetric part instead.
        S = 0.5 * (R + R.T) - cos_t * np.eye(3)
        col = int(np.argmax(np.diag(S)))
        axis = S[:, col] / np.sqrt(max(S[col, col], 1e-300))
        axis /= np.linalg.norm(axis)
        sin_t = 0.5 * float(axis @ w)
        theta = np.arctan2(abs(sin_t), cos_t)
        if sin_t < 0.0:
            axis = -axis
        phi = theta * axis
        if abs(theta - np.pi) < 1e-12:
            phi = _canonical_pi(phi)
        return phi
    theta = np.arccos(cos_t)
    return w * (theta / (2.0 * np.sin(theta)))


def _canonical_pi(phi: np.ndarray) -> np.ndarray:
    for c in phi:
        if abs(c) > 1e-12:
            return phi if c > 0 else -phi
    return phi


def log_batch(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    flat = R.reshape(-1, 3, 3)
    out = np.array([log(r) for r in flat]) if len(flat) else np.zeros((0, 3))
    return out.reshape(R.shape[:-2] + (3,))


def normalize(phi) -> np.ndarray:
    """Wrap an axis-angle vector to its minimal representation."""
    phi = np.asarray(phi, dtype=float)
    if np.linalg.norm(phi) <= np.pi:
        return phi.copy()
    return log(exp(phi))


def right_jacobian(phi) -> np.ndarray:
    """Right Jacobian J_r with exp(phi + d) ~ exp(phi) exp(J_r(phi) d)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    K = skew_batch(phi)
    small = theta < 1e-5
    t = np.where(small, 1.0, theta)
    c1 = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(t)) / t**2)
    c2 = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (t - np.sin(t)) / t**3)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye - c1[..., None, None] * K + c2[..., None, None] * (K @ K)


def project_to_so3(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    M = U @ Vt
    if np.linalg.det(M) < 0:
        U[:, -1] *= -1
        M = U @ Vt
    return M
