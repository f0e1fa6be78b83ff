"""Point-to-plane measurement rows and the iterated Kalman update.

The update works in information form: with prior covariance ``P``, stacked
Jacobian ``H`` (rows w.r.t. the state at the frame start) and weights ``W``,

    P_post = (H^T W H + P^-1)^-1,   K = P_post H^T W,   dx = K (z - h).

Because the filter is iterated, later iterations also carry the prior pull
``-P_post P^-1 (x_j - x_prior)``; on the first iteration this term vanishes and
the step is exactly the Gauss-Newton solution.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg as sla

from . import so3
from .errors import OutOfIntervalError, SingularSystemError
from .trajectory import DT_MAX, PHI, STATE_DIM, GpState

log = logging.getLogger(__name__)

DEFAULT_POINT_STD = 0.05
TIKHONOV = 1e-9


@dataclass(frozen=True)
class MeasurementRow:
    h: float
    H_row: np.ndarray
    stamp: float
    weight: float = 1.0 / DEFAULT_POINT_STD**2

    def __post_init__(self):
        H = np.asarray(self.H_row, dtype=float).reshape(STATE_DIM)
        if not (np.isfinite(self.h) and np.all(np.isfinite(H))):
            raise ValueError("measurement row has non-finite entries")
        if not self.weight > 0:
            raise ValueError("measurement weight must be positive")
        object.__setattr__(self, "H_row", H)


@dataclass
class UpdateReport:
    iterations: int
    final_residual_rms: float
    converged: bool
    state_delta_norm: float
    tikhonov: bool = False
    degenerate: bool = False
    n_rows: int = 0
    residual_history: list = field(default_factory=list)


def residual_rows(state: GpState, points: np.ndarray, stamps: np.ndarray,
                  centroids: np.ndarray, normals: np.ndarray,
                  *, dt_max: float = DT_MAX):
    """Residuals ``n^T (R(t_i) p + t(t_i) - mu)`` and their 15-dim Jacobians.

    Jacobians are taken w.r.t. the state at ``state.t_ref``; the attitude uses
    the right perturbation. The angular-rate block includes the right Jacobian
    of ``exp(omega dt)`` so it is exact rather than first order.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    normals = np.asarray(normals, dtype=float).reshape(-1, 3)
    dt = np.asarray(stamps, dtype=float).reshape(-1) - state.t_ref
    if dt.size and (dt.min() < -1e-9 or dt.max() > dt_max + 1e-9):
        raise OutOfIntervalError("point stamp outside the state interval")
    R0 = state.rotation
    a, w = state.acc, state.omega
    wdt = dt[:, None] * w
    E = so3.exp_batch(wdt)
    Ep = np.einsum("nij,nj->ni", E, points)
    p_world = Ep @ R0.T + state.translation + np.outer(dt, state.velocity) \
        + 0.5 * np.outer(dt * dt, R0 @ a)
    h = np.einsum("ni,ni->n", normals, p_world - centroids)

    nR = normals @ R0  # rows n^T R0
    H = np.empty((len(h), STATE_DIM))
    H[:, 0:3] = normals
    # -n^T R0 ([E p]x + 0.5 [a]x dt^2) == (E p) x (R0^T n) + 0.5 dt^2 a x (R0^T n)
    H[:, 3:6] = np.cross(Ep, nR) + 0.5 * (dt * dt)[:, None] * np.cross(a, nR)
    H[:, 6:9] = normals * dt[:, None]
    # -n^T R0 E [p]x Jr dt
    nRE = np.einsum("ni,nij->nj", nR, E)
    Jr = so3.right_jacobian(wdt)
    H[:, 9:12] = np.einsum("ni,nij->nj", np.cross(points, nRE), Jr) * dt[:, None]
    H[:, 12:15] = 0.5 * nR * (dt * dt)[:, None]
    return h, H


def residual_row(point, voxel_plane, state: GpState, *, weight: float | None = None,
                 dt_max: float = DT_MAX) -> MeasurementRow:
    """Single-point convenience wrapper around :func:`residual_rows`.

    ``point`` needs ``.p`` and ``.stamp``; ``voxel_plane`` is
    ``(centroid, unit normal)``.
    """
    centroid, normal = (np.asarray(x, dtype=float) for x in voxel_plane)
    if abs(np.linalg.norm(normal) - 1.0) >= 1e-9:
        raise ValueError("plane normal must be unit length")
    h, H = residual_rows(state, np.asarray(point.p)[None], [point.stamp],
                         centroid[None], normal[None], dt_max=dt_max)
    return MeasurementRow(float(h[0]), H[0], float(point.stamp),
                          1.0 / DEFAULT_POINT_STD**2 if weight is None else weight)


def _stack(rows: Sequence[MeasurementRow]):
    h = np.array([r.h for r in rows], dtype=float)
    H = np.array([r.H_row for r in rows], dtype=float).reshape(-1, STATE_DIM)
    w = np.array([r.weight for r in rows], dtype=float)
    return h, H, w


def _information(cov: np.ndarray):
    """Inverse of the prior covariance; regularized when not positive definite."""
    try:
        c = sla.cho_factor(cov)
        return sla.cho_solve(c, np.eye(len(cov))), False
    except np.linalg.LinAlgError:
        reg = cov + TIKHONOV * np.eye(len(cov))
        try:
            c = sla.cho_factor(reg)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError("prior covariance is not positive semi-definite") from exc
        return sla.cho_solve(c, np.eye(len(cov))), True


def _pose_degenerate(HtWH: np.ndarray, rel_tol: float) -> bool:
    ev = np.linalg.eigvalsh(HtWH[:6, :6])
    return bool(ev[-1] <= 0.0 or ev[0] <= rel_tol * ev[-1])


def solve_normal_equations(info: np.ndarray, rhs: np.ndarray, *, degenerate: bool = False):
    """Cholesky solve of the normal equations, returning ``(x, inverse, tikhonov)``.

    A ``TIKHONOV * I`` term is added when ``degenerate`` or when the plain
    factorization fails.
    """
    n = len(info)
    tik = degenerate
    M = info + TIKHONOV * np.eye(n) if tik else info
    try:
        c = sla.cho_factor(M)
    except np.linalg.LinAlgError:
        if tik:
            raise SingularSystemError("normal-equation matrix is singular") from None
        tik = True
        try:
            c = sla.cho_factor(info + TIKHONOV * np.eye(n))
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError("normal-equation matrix is singular") from exc
    inv = sla.cho_solve(c, np.eye(n))
    return inv @ rhs, 0.5 * (inv + inv.T), tik


def kalman_gain_step(prior_cov: np.ndarray, H: np.ndarray, h: np.ndarray, w: np.ndarray,
                     prior_offset: np.ndarray | None = None, *, degeneracy_tol: float = 1e-6):
    """One information-form update. Returns ``(delta, post_cov, K, tikhonov, degenerate)``.

    ``prior_offset`` is ``x_j - x_prior`` for iterations after the first.
    """
    P_inv, reg = _information(prior_cov)
    HtW = H.T * w
    HtWH = HtW @ H
    degenerate = _pose_degenerate(HtWH, degeneracy_tol)
    _, post, tik = solve_normal_equations(HtWH + P_inv, np.zeros(STATE_DIM), degenerate=degenerate)
    K = post @ HtW
    delta = K @ (-h)
    if prior_offset is not None:
        delta -= post @ (P_inv @ prior_offset)
    return delta, post, K, tik or reg, degenerate


def gauss_newton_oracle(prior_cov: np.ndarray, rows) -> np.ndarray:
    """Dense solve of ``(H^T W H + P^-1) dx = H^T W (z - h)`` with ``z = 0``.

    Independent reference for the gain-form update; uses LU factorization
    instead of the Cholesky path.
    """
    if isinstance(rows, tuple):
        h, H, w = rows
    else:
        h, H, w = _stack(rows)
    P_inv = np.linalg.solve(prior_cov, np.eye(len(prior_cov)))
    N = H.T @ (w[:, None] * H) + P_inv
    rhs = H.T @ (w * (-h))
    try:
        lu = sla.lu_factor(N, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularSystemError("normal-equation matrix is singular") from exc
    if np.any(np.abs(np.diag(lu[0])) < 1e-300):
        raise SingularSystemError("normal-equation matrix is singular")
    return sla.lu_solve(lu, rhs)


Measure = Callable[[GpState], tuple]


def _linear_measure(rows: Sequence[MeasurementRow], anchor: GpState) -> Measure:
    h0, H, w = _stack(rows)

    def measure(state: GpState):
        return h0 + H @ state.boxminus(anchor), H, w

    return measure


def kalman_update(state: GpState, rows, *, max_iter: int = 5, eps: float = 1e-4,
                  degeneracy_tol: float = 1e-6):
    """Iterated Kalman update at ``state.t_ref``.

    Args:
        state: predicted (prior) state.
        rows: either a non-empty list of :class:`MeasurementRow` (treated as a
            fixed linearization about ``state``) or a callable
            ``measure(state) -> (h, H, weights)`` that relinearizes.
        max_iter: iteration cap.
        eps: convergence threshold on the norm of the 6 pose components of
            each increment.

    Returns:
        ``(posterior GpState, UpdateReport)``. Non-convergence is reported, not
        raised.
    """
    if callable(rows):
        measure = rows
    else:
        rows = list(rows)
        if not rows:
            raise ValueError("kalman_update needs at least one measurement row")
        measure = _linear_measure(rows, state)

    prior = state
    current = state
    post_cov = state.cov
    history = []
    converged = False
    tik_any = False
    degenerate = False
    delta_norm = 0.0
    n_rows = 0
    it = 0
    for it in range(1, max_iter + 1):
        h, H, w = measure(current)
        n_rows = len(h)
        if n_rows == 0:
            raise ValueError("kalman_update needs at least one measurement row")
        history.append(float(np.sqrt(np.mean(h * h))))
        offset = None if it == 1 else current.boxminus(prior)
        delta, post_cov, _, tik, degenerate = kalman_gain_step(
            prior.cov, H, h, w, offset, degeneracy_tol=degeneracy_tol)
        tik_any |= tik
        # increments are expressed at the current linearization point
        current = GpState(prior.t_ref, current.boxplus(delta), prior.cov)
        delta_norm = float(np.linalg.norm(delta[:6]))
        if delta_norm < eps:
            converged = True
            break
    h_final = measure(current)[0]
    final_rms = float(np.sqrt(np.mean(h_final * h_final)))
    history.append(final_rms)
    if tik_any:
        log.debug("Tikhonov fallback applied in Kalman update")
    posterior = GpState(prior.t_ref, current.mean, post_cov)
    return posterior, UpdateReport(it, final_rms, converged, delta_norm, tik_any,
                                   degenerate, n_rows, history)
