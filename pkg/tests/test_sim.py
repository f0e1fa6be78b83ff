import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctmlo import sim
from ctmlo.errors import ConfigError, OutOfIntervalError
from ctmlo.sync import LidarExtrinsic


def test_constant_velocity_pose():
    pose = sim.gt_pose(sim.ConstantVelocity(velocity=(1, 0, 0)), 2.0)
    np.testing.assert_allclose(pose.translation, [2, 0, 0])
    np.testing.assert_allclose(pose.rotation, np.eye(3))


def test_circle_keeps_radius():
    prof = sim.Circular(radius=3.0, rate=0.7)
    t = np.linspace(0, 20, 501)
    _, p = prof.poses(t)
    np.testing.assert_allclose(np.linalg.norm(p, axis=1), 3.0, rtol=0, atol=1e-12)


@pytest.mark.parametrize("profile", [sim.Sinusoidal(), sim.Circular(2.0, -0.4, (1, 2, 0)),
                                     sim.ConstantVelocity((0.3, -1, 2))])
def test_velocity_matches_finite_difference(profile):
    t = np.linspace(0.1, 30, 97)
    h = 1e-5
    fd = (profile.poses(t + h)[1] - profile.poses(t - h)[1]) / (2 * h)
    np.testing.assert_allclose(fd, profile.velocities(t), atol=1e-6)


def test_sinusoid_starts_at_rest_with_identity_attitude():
    prof = sim.Sinusoidal()
    R, p = prof.poses(np.array([0.0]))
    np.testing.assert_allclose(R[0], np.eye(3), atol=1e-15)
    np.testing.assert_allclose(p[0], prof.origin)
    np.testing.assert_allclose(prof.velocities([0.0]), 0.0)


def test_standard_motion_envelope():
    prof = sim.Sinusoidal()
    t = np.linspace(0, 60, 60001)
    v = prof.velocities(t)
    assert np.isclose(np.abs(v).max(), 2.0, atol=1e-3)
    R, _ = prof.poses(t)
    dR = np.einsum("nji,njk->nik", R[:-1], R[1:])
    from ctmlo import so3
    rate = np.linalg.norm(so3.log_batch(dR), axis=1) / (t[1] - t[0])
    assert 0.9 < rate.max() < 1.3


def test_gt_pose_rejects_out_of_range():
    with pytest.raises(OutOfIntervalError):
        sim.gt_pose(sim.Sinusoidal(), -0.1, 5.0)
    with pytest.raises(OutOfIntervalError):
        sim.gt_pose(sim.Sinusoidal(), 5.1, 5.0)


def test_dense_ground_truth_is_uniform():
    gt = sim.GroundTruth(sim.Sinusoidal(), 2.0)
    s, R, p = gt.dense()
    assert len(s) == 2001
    np.testing.assert_allclose(np.diff(s), 1e-3, atol=1e-12)


def _floor_scenario(range_std=0.0, rays=1000.0, profile=None, dropouts=()):
    pattern = sim.ScanPattern(rays_per_s=rays, channels=1, elevation_deg=(-90.0, -90.0),
                              range_std=range_std)
    floor = sim.PlaneRect.box_face(2, 0.0, (-5, -5), (5, 5))
    return sim.ScenarioConfig(
        planes=(floor,),
        profile=profile or sim.ConstantVelocity((0, 0, 0), origin=(0, 0, 2.0)),
        lidars=(sim.LidarSpec(LidarExtrinsic.identity(), pattern),),
        duration=1.0, dropouts=dropouts, seed=5)


def test_stationary_down_ray_sees_two_metres():
    scan = sim.cast_scan(_floor_scenario(), 0, 0.0, 0.1)
    assert len(scan) == 100
    np.testing.assert_allclose(scan.true_range, 2.0, atol=1e-12)
    np.testing.assert_allclose(scan.points, np.tile([0, 0, -2.0], (100, 1)), atol=1e-12)
    noisy = sim.cast_scan(_floor_scenario(0.02), 0, 0.0, 1.0)
    r = np.linalg.norm(noisy.points, axis=1)
    assert abs(r.mean() - 2.0) < 0.005 and 0.015 < r.std() < 0.025


def test_ray_missing_every_plane_emits_nothing():
    scen = _floor_scenario(profile=sim.ConstantVelocity((0, 0, 0), origin=(20, 0, 2.0)))
    assert len(sim.cast_scan(scen, 0, 0.0, 0.5)) == 0


def test_intersect_prefers_nearest_and_respects_gate():
    planes = (sim.PlaneRect.box_face(0, 5.0, (-1, -1), (1, 1)),
              sim.PlaneRect.box_face(0, 3.0, (-1, -1), (1, 1)))
    r, idx = sim.intersect([[0, 0, 0]], [[1, 0, 0]], planes)
    assert r[0] == 3.0 and idx[0] == 1
    r, idx = sim.intersect([[0, 0, 0]], [[1, 0, 0]], planes, r_min=4.0)
    assert r[0] == 5.0 and idx[0] == 0
    r, idx = sim.intersect([[0, 0, 0]], [[-1, 0, 0]], planes)
    assert idx[0] == -1 and np.isinf(r[0])


def test_reprojection_identity_under_motion():
    scen = sim.standard_room(4.0, seed=3, range_std=0.0)
    for j, spec in enumerate(scen.lidars):
        scan = sim.cast_scan(scen, j, 0.7, 2.9)
        assert len(scan) > 1000
        Rb, pb = scen.profile.poses(scan.stamps)
        ext = spec.extrinsic
        body = scan.points @ ext.rotation.T + ext.translation
        world = np.einsum("nij,nj->ni", Rb, body) + pb
        for k, pl in enumerate(scen.planes):
            on = scan.plane_index == k
            if on.any():
                assert np.abs((world[on] - pl.center) @ pl.normal).max() < 1e-9


def test_stream_is_deterministic_and_split_invariant():
    scen = sim.standard_room(1.0, seed=11)
    whole = sim.cast_scan(scen, 1, 0.0, 1.0)
    parts = [sim.cast_scan(scen, 1, a, b) for a, b in [(0.0, 0.013), (0.013, 0.5), (0.5, 1.0)]]
    np.testing.assert_array_equal(whole.points, np.concatenate([p.points for p in parts]))
    np.testing.assert_array_equal(whole.stamps, np.concatenate([p.stamps for p in parts]))
    again = sim.cast_scan(sim.standard_room(1.0, seed=11), 1, 0.0, 1.0)
    assert whole.points.tobytes() == again.points.tobytes()
    other = sim.cast_scan(sim.standard_room(1.0, seed=12), 1, 0.0, 1.0)
    assert not np.array_equal(whole.points, other.points)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 0.9), st.floats(0.001, 0.5))
def test_dropout_windows_are_empty(t_on, width):
    scen = _floor_scenario(dropouts=(sim.Dropout(0, t_on, t_on + width),))
    scan = sim.cast_scan(scen, 0, 0.0, 1.0)
    inside = (scan.stamps >= t_on) & (scan.stamps < t_on + width)
    assert not inside.any()
    assert len(scan) >= 1000 - int(np.ceil(width * 1000)) - 1


def test_scenario_from_dict_overrides():
    scen = sim.scenario_from_dict({
        "preset": "standard_room", "duration": 3, "seed": 9,
        "trajectory": {"profile": "circular", "radius": 1.5, "rate": 0.3, "center": [0, 0, 1.5]},
        "dropouts": [[1, 1.0, 2.0]],
    })
    assert scen.duration == 3 and scen.seed == 9 and len(scen.lidars) == 2
    assert isinstance(scen.profile, sim.Circular)
    assert scen.dropouts[0] == sim.Dropout(1, 1.0, 2.0)


@pytest.mark.parametrize("bad", [{"preset": "moon"}, {"duration": -1}, {"wat": 1},
                                 {"trajectory": {"profile": "zigzag"}},
                                 {"dropouts": [[5, 0, 1]]}])
def test_scenario_validation(bad):
    with pytest.raises(ConfigError):
        sim.scenario_from_dict(bad)


def test_plane_needs_positive_extent():
    with pytest.raises(ConfigError):
        sim.PlaneRect((0, 0, 0), (0, 0, 1), (1, 0, 0), 0.0, 1.0)


def test_record_stream_sorted():
    S, I, P = sim.record_stream(sim.standard_room(0.3, seed=2))
    assert len(S) == len(I) == len(P) > 10000
    assert np.all(np.diff(S) >= 0)
    assert set(np.unique(I).tolist()) == {0, 1}
