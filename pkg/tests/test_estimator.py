from types import SimpleNamespace

import numpy as np
import pytest

from ctmlo import so3
from ctmlo.errors import OutOfIntervalError, SingularSystemError
from ctmlo.estimator import (
    MeasurementRow, gauss_newton_oracle, kalman_update, residual_row, residual_rows,
)
from ctmlo.trajectory import STATE_DIM, GpState, predict_mean
from _helpers import random_psd, random_state


def point_to_plane(state, p, stamp, mu, n):
    """Residual from the mean map directly (oracle for the Jacobians)."""
    m = predict_mean(state, stamp - state.t_ref)
    return float(n @ (so3.exp(m[3:6]) @ p + m[0:3] - mu))


def numeric_row(state, p, stamp, mu, n, eps=1e-6):
    out = np.zeros(STATE_DIM)
    for k in range(STATE_DIM):
        d = np.zeros(STATE_DIM)
        d[k] = eps
        hp = point_to_plane(GpState(state.t_ref, state.boxplus(d), state.cov), p, stamp, mu, n)
        hm = point_to_plane(GpState(state.t_ref, state.boxplus(-d), state.cov), p, stamp, mu, n)
        out[k] = (hp - hm) / (2 * eps)
    return out


def random_case(rng):
    state = random_state(rng, t_ref=10.0, cov=np.eye(STATE_DIM))
    p = rng.normal(size=3) * 10
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    mu = rng.normal(size=3) * 10
    stamp = 10.0 + rng.uniform(0, 0.01)
    return state, p, stamp, mu, n


def test_zero_residual_at_centroid():
    state = GpState(0.0, np.r_[1, 2, 3, 0.1, 0.2, 0.3, np.zeros(9)], np.eye(15))
    p = np.array([0.5, -1.0, 2.0])
    mu = state.rotation @ p + state.translation
    row = residual_row(SimpleNamespace(p=p, stamp=0.0), (mu, [0, 0, 1.0]), state)
    assert row.h == pytest.approx(0.0, abs=1e-14)


def test_row_at_zero_dt_identity_rotation():
    state = GpState(0.0, np.zeros(15), np.eye(15))
    p = np.array([1.0, 2.0, 3.0])
    n = np.array([0.0, 0.6, 0.8])
    row = residual_row(SimpleNamespace(p=p, stamp=0.0), (np.zeros(3), n), state)
    expected = np.concatenate([n, -n @ so3.skew(p), np.zeros(9)])
    np.testing.assert_allclose(row.H_row, expected, atol=1e-15)


def test_jacobian_matches_finite_differences(rng):
    worst = 0.0
    for _ in range(300):
        state, p, stamp, mu, n = random_case(rng)
        row = residual_row(SimpleNamespace(p=p, stamp=stamp), (mu, n), state)
        num = numeric_row(state, p, stamp, mu, n)
        worst = max(worst, np.abs(row.H_row - num).max() / np.abs(row.H_row).max())
    assert worst < 1e-5


def test_vectorized_rows_match_single_rows(rng):
    state, *_ = random_case(rng)
    pts = rng.normal(size=(20, 3)) * 5
    stamps = state.t_ref + rng.uniform(0, 0.01, 20)
    normals = rng.normal(size=(20, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    mus = rng.normal(size=(20, 3))
    h, H = residual_rows(state, pts, stamps, mus, normals)
    for i in range(20):
        r = residual_row(SimpleNamespace(p=pts[i], stamp=stamps[i]), (mus[i], normals[i]), state)
        assert h[i] == pytest.approx(r.h, abs=1e-12)
        np.testing.assert_allclose(H[i], r.H_row, atol=1e-12)


def test_residual_row_rejects_bad_inputs():
    state = GpState(0.0, np.zeros(15), np.eye(15))
    pt = SimpleNamespace(p=np.ones(3), stamp=0.0)
    with pytest.raises(ValueError):
        residual_row(pt, (np.zeros(3), [0, 0, 1.1]), state)
    with pytest.raises(OutOfIntervalError):
        residual_row(SimpleNamespace(p=np.ones(3), stamp=0.5), (np.zeros(3), [0, 0, 1.0]), state)


def _random_rows(rng, m, state):
    rows = []
    for _ in range(m):
        H = rng.normal(size=STATE_DIM)
        rows.append(MeasurementRow(float(rng.normal()), H, state.t_ref, float(rng.uniform(1, 400))))
    return rows


def test_zero_residuals_keep_mean_and_shrink_cov(rng):
    state = random_state(rng)
    rows = [MeasurementRow(0.0, r.H_row, r.stamp, r.weight) for r in _random_rows(rng, 10, state)]
    post, rep = kalman_update(state, rows)
    np.testing.assert_allclose(post.mean, state.mean, atol=1e-12)
    assert np.trace(post.cov) < np.trace(state.cov)
    assert rep.converged and rep.iterations == 1


def test_single_iteration_equals_gauss_newton(rng):
    for _ in range(50):
        state = random_state(rng)
        rows = _random_rows(rng, 20, state)
        post, _ = kalman_update(state, rows, max_iter=1)
        delta = post.boxminus(state)
        ref = gauss_newton_oracle(state.cov, rows)
        np.testing.assert_allclose(delta, ref, rtol=1e-8, atol=1e-10 * np.abs(ref).max())


def test_kalman_gain_form_agrees_with_information_form(rng):
    # Sherman-Morrison-Woodbury: P H^T (H P H^T + W^-1)^-1 == (H^T W H + P^-1)^-1 H^T W
    state = random_state(rng)
    rows = _random_rows(rng, 20, state)
    H = np.array([r.H_row for r in rows])
    h = np.array([r.h for r in rows])
    W = np.array([r.weight for r in rows])
    P = state.cov
    K = P @ H.T @ np.linalg.inv(H @ P @ H.T + np.diag(1 / W))
    ref = gauss_newton_oracle(P, rows)
    np.testing.assert_allclose(K @ (-h), ref, rtol=1e-8, atol=1e-12)
    post, _ = kalman_update(state, rows, max_iter=1)
    np.testing.assert_allclose(post.cov, (np.eye(15) - K @ H) @ P, rtol=1e-6, atol=1e-10)


def test_translation_only_rows_leave_rotation_untouched(rng):
    cov = np.zeros((15, 15))
    for blk in range(5):
        s = slice(3 * blk, 3 * blk + 3)
        cov[s, s] = random_psd(rng, 3)
    state = GpState(0.0, np.zeros(15), cov)
    rows = []
    for _ in range(10):
        H = np.zeros(15)
        H[0:3] = rng.normal(size=3)
        rows.append(MeasurementRow(float(rng.normal()), H, 0.0))
    delta = gauss_newton_oracle(cov, rows)
    np.testing.assert_allclose(delta[3:15], 0.0, atol=1e-15)
    post, _ = kalman_update(state, rows, max_iter=1)
    np.testing.assert_allclose(post.mean[3:15], 0.0, atol=1e-15)


def test_confident_prior_barely_moves(rng):
    state = random_state(rng)
    tight = GpState(state.t_ref, state.mean, state.cov * 1e-12)
    rows = [MeasurementRow(r.h * 100, r.H_row, r.stamp, r.weight) for r in _random_rows(rng, 30, state)]
    post, _ = kalman_update(tight, rows)
    assert np.linalg.norm(post.boxminus(tight)) < 1e-6


def test_zero_residual_oracle():
    rows = [MeasurementRow(0.0, np.eye(15)[k], 0.0) for k in range(15)]
    np.testing.assert_allclose(gauss_newton_oracle(np.eye(15), rows), 0.0)


def test_oracle_signals_singular_system():
    cov = np.eye(15)
    cov[0, 0] = 0.0
    rows = [MeasurementRow(1.0, np.eye(15)[1], 0.0)]
    with pytest.raises((SingularSystemError, np.linalg.LinAlgError)):
        gauss_newton_oracle(cov, rows)


def test_covariance_contracts(rng):
    for _ in range(100):
        state = random_state(rng)
        post, _ = kalman_update(state, _random_rows(rng, int(rng.integers(1, 30)), state))
        assert np.trace(post.cov) <= np.trace(state.cov) + 1e-12


def test_degenerate_geometry_reports_tikhonov(rng):
    state = random_state(rng)
    rows = []
    for _ in range(20):
        H = np.zeros(15)
        H[0] = 1.0  # only x-translation observed
        rows.append(MeasurementRow(float(rng.normal()) * 0.1, H, state.t_ref))
    post, rep = kalman_update(state, rows)
    assert rep.degenerate and rep.tikhonov
    assert np.all(np.isfinite(post.mean))


def test_relinearizing_measure_converges(rng):
    # planes x=0, y=0, z=0 plus tilted ones; truth offset recovered by iteration
    truth = GpState(0.0, np.r_[0.3, -0.2, 0.1, 0.05, -0.03, 0.08, np.zeros(9)], np.eye(15))
    normals = rng.normal(size=(200, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    pts = rng.normal(size=(200, 3)) * 5
    stamps = np.zeros(200)
    world = pts @ truth.rotation.T + truth.translation
    mus = world - normals * 0.0

    def measure(s):
        h, H = residual_rows(s, pts, stamps, mus, normals)
        return h, H, np.full(len(h), 400.0)

    prior = GpState(0.0, np.zeros(15), np.eye(15))
    post, rep = kalman_update(prior, measure, max_iter=10)
    assert rep.converged
    np.testing.assert_allclose(post.mean[:6], truth.mean[:6], atol=1e-3)
    hist = rep.residual_history
    assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))
