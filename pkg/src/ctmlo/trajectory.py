"""Gaussian-process trajectory model driven by a white-noise jerk/angular
acceleration SDE.

The 15-dim state is ordered ``[t, phi, v, omega, a]``: world translation,
axis-angle attitude (body to world), world velocity, body angular rate and
body acceleration. Rotation errors live in the right-perturbation chart
``R = R_hat @ exp(dphi)``.

Within one propagation interval the attitude and acceleration are frozen at
their start values inside the translation/velocity integrals, so the mean map
and its linearization stay closed-form.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import so3
from .errors import OutOfIntervalError

STATE_DIM = 15
T, PHI, V, W, A = (slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15))

DT_MAX = 0.1


@dataclass(frozen=True)
class ProcessNoise:
    """Power-spectral densities of the angular-rate and acceleration noise."""

    q_omega: tuple = (1.0, 1.0, 1.0)
    q_acc: tuple = (10.0, 10.0, 10.0)

    def __post_init__(self):
        q = np.concatenate([np.ravel(self.q_omega), np.ravel(self.q_acc)])
        if q.shape != (6,) or not np.all(q > 0):
            raise ValueError("process noise densities must be 3+3 strictly positive values")
        object.__setattr__(self, "q_omega", tuple(float(x) for x in np.ravel(self.q_omega)))
        object.__setattr__(self, "q_acc", tuple(float(x) for x in np.ravel(self.q_acc)))

    @property
    def matrix(self) -> np.ndarray:
        return np.diag(np.concatenate([self.q_omega, self.q_acc]))


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray
    stamp: float = 0.0

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, p: np.ndarray) -> np.ndarray:
        return np.asarray(p) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class GpState:
    """Mean and covariance of the trajectory state at ``t_ref``."""

    t_ref: float
    mean: np.ndarray
    cov: np.ndarray = field(repr=False)

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(STATE_DIM)
        cov = np.array(self.cov, dtype=float).reshape(STATE_DIM, STATE_DIM)
        mean[PHI] = so3.normalize(mean[PHI])
        cov = 0.5 * (cov + cov.T)
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "t_ref", float(self.t_ref))

    @classmethod
    def initial(cls, t_ref: float = 0.0, variances=(0.01, 0.01, 1.0, 1.0, 10.0)) -> "GpState":
        """Identity pose at rest with a diagonal prior.

        ``variances`` holds one per-axis variance per block (t, phi, v, omega, a).
        """
        var = np.repeat(np.asarray(variances, dtype=float), 3)
        return cls(t_ref, np.zeros(STATE_DIM), np.diag(var))

    @property
    def translation(self) -> np.ndarray:
        return self.mean[T]

    @property
    def rotation(self) -> np.ndarray:
        return so3.exp(self.mean[PHI])

    @property
    def velocity(self) -> np.ndarray:
        return self.mean[V]

    @property
    def omega(self) -> np.ndarray:
        return self.mean[W]

    @property
    def acc(self) -> np.ndarray:
        return self.mean[A]

    def pose(self) -> Pose:
        return Pose(self.rotation, self.translation.copy(), self.t_ref)

    def with_mean(self, mean) -> "GpState":
        return GpState(self.t_ref, mean, self.cov)

    def boxplus(self, delta: np.ndarray) -> np.ndarray:
        """Apply an error-state increment; rotation by right multiplication."""
        delta = np.asarray(delta, dtype=float)
        out = self.mean + delta
        out[PHI] = so3.log(self.rotation @ so3.exp(delta[PHI]))
        return out

    def boxminus(self, other: "GpState") -> np.ndarray:
        """Error-state difference ``self - other`` in the same chart."""
        d = self.mean - other.mean
        d[PHI] = so3.log(other.rotation.T @ self.rotation)
        return d


def _check_dt(dt: float, dt_max: float) -> None:
    if not (0.0 <= dt <= dt_max + 1e-12):
        raise OutOfIntervalError(f"propagation interval {dt!r} outside [0, {dt_max}]")


def predict_mean(state: GpState, dt: float, *, dt_max: float = DT_MAX) -> np.ndarray:
    """Propagate the mean by ``dt`` seconds (frozen attitude/acceleration)."""
    _check_dt(dt, dt_max)
    x = state.mean
    R = state.rotation
    t, v, w, a = x[T], x[V], x[W], x[A]
    Ra = R @ a
    out = x.copy()
    out[T] = t + v * dt + 0.5 * Ra * dt * dt
    out[PHI] = so3.log(R @ so3.exp(w * dt))
    out[V] = v + Ra * dt
    return out


def error_dynamics(state: GpState) -> np.ndarray:
    """Continuous-time error-state matrix F, frozen at the state's mean.

    F is nilpotent (F^4 = 0), which makes the transition matrix and the
    process-noise integral polynomial in dt.
    """
    R = state.rotation
    F = np.zeros((STATE_DIM, STATE_DIM))
    F[T, V] = np.eye(3)
    F[PHI, W] = np.eye(3)
    F[V, PHI] = -R @ so3.skew(state.acc)
    F[V, A] = R
    return F


def _noise_input() -> np.ndarray:
    G = np.zeros((STATE_DIM, 6))
    G[W, 0:3] = np.eye(3)
    G[A, 3:6] = np.eye(3)
    return G


def transition_matrix(state: GpState, dt: float) -> np.ndarray:
    F = error_dynamics(state)
    F2 = F @ F
    return np.eye(STATE_DIM) + F * dt + F2 * (dt**2 / 2.0) + (F2 @ F) * (dt**3 / 6.0)


def predict_cov(state: GpState, dt: float, q: ProcessNoise, *, dt_max: float = DT_MAX) -> np.ndarray:
    """Propagate the covariance: ``Phi P Phi^T + int Phi(s) G Q G^T Phi(s)^T ds``.

    The integrand is a matrix polynomial ``sum_j B_j s^j`` (``B_j = F^j G / j!``),
    so the integral is summed term-by-term exactly.
    """
    _check_dt(dt, dt_max)
    if dt == 0.0:
        return state.cov.copy()
    F = error_dynamics(state)
    G = _noise_input()
    Q = q.matrix
    B = [G]
    fact = 1.0
    for j in range(1, 4):
        fact *= j
        B.append(np.linalg.matrix_power(F, j) @ G / fact)
    Phi = transition_matrix(state, dt)
    P = Phi @ state.cov @ Phi.T
    for j, Bj in enumerate(B):
        BQ = Bj @ Q
        for k, Bk in enumerate(B):
            p = j + k + 1
            P += (BQ @ Bk.T) * (dt**p / p)
    return 0.5 * (P + P.T)


def propagate(state: GpState, dt: float, q: ProcessNoise, *, dt_max: float = DT_MAX) -> GpState:
    """Predicted state at ``t_ref + dt`` (Kalman prediction step)."""
    return GpState(state.t_ref + dt, predict_mean(state, dt, dt_max=dt_max),
                   predict_cov(state, dt, q, dt_max=dt_max))


def query_pose(state: GpState, t_query: float, *, dt_max: float = DT_MAX) -> Pose:
    dt = t_query - state.t_ref
    if not (-1e-12 <= dt <= dt_max + 1e-12):
        raise OutOfIntervalError(
            f"query time {t_query!r} outside [{state.t_ref}, {state.t_ref + dt_max}]")
    m = predict_mean(state, min(max(dt, 0.0), dt_max), dt_max=dt_max)
    return Pose(so3.exp(m[PHI]), m[T].copy(), float(t_query))


def query_poses(state: GpState, stamps: np.ndarray, *, dt_max: float = DT_MAX):
    """Vectorized pose queries; returns ``(R (N,3,3), t (N,3))``.

    Same closed form as :func:`predict_mean` without re-logging the attitude.
    """
    dt = np.asarray(stamps, dtype=float) - state.t_ref
    if dt.size and (dt.min() < -1e-9 or dt.max() > dt_max + 1e-9):
        raise OutOfIntervalError("query stamps outside the state's interval")
    R0 = state.rotation
    Ra = R0 @ state.acc
    t = state.translation + np.outer(dt, state.velocity) + 0.5 * np.outer(dt * dt, Ra)
    R = R0 @ so3.exp_batch(np.outer(dt, state.omega))
    return R, t
