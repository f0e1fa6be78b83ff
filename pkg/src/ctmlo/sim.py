"""Deterministic synthetic multi-LiDAR data over a world of planar rectangles.

Ground-truth body trajectories are closed-form, so every simulated return can
be checked exactly: a zero-noise point mapped to the world with the true pose
at its own stamp lies on the plane it was cast against.

Range noise is counter based. The Gaussian draw for ray ``k`` of LiDAR ``j``
depends only on ``(seed, j, k)``, so splitting a scan into arbitrary intervals
(or generating LiDARs in parallel) yields bit-identical streams.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import so3
from .errors import ConfigError, OutOfIntervalError
from .sync import LidarExtrinsic, TimedPoint
from .trajectory import Pose

NOISE_BLOCK = 4096
GT_RATE = 1000.0
_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


# --------------------------------------------------------------------------
# world
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PlaneRect:
    """Rectangle ``center + a*u + b*v`` with ``|a| <= half_u``, ``|b| <= half_v``."""

    center: np.ndarray
    normal: np.ndarray
    axis_u: np.ndarray
    half_u: float
    half_v: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(3)
        n = np.asarray(self.normal, dtype=float).reshape(3)
        u = np.asarray(self.axis_u, dtype=float).reshape(3)
        if not (self.half_u > 0 and self.half_v > 0):
            raise ConfigError("plane extents must be positive")
        if np.linalg.norm(n) < 1e-12 or np.linalg.norm(u) < 1e-12:
            raise ConfigError("plane normal and axis must be non-zero")
        n = n / np.linalg.norm(n)
        u = u - n * (n @ u)
        if np.linalg.norm(u) < 1e-9:
            raise ConfigError("plane axis is parallel to its normal")
        u = u / np.linalg.norm(u)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "axis_u", u)
        object.__setattr__(self, "half_u", float(self.half_u))
        object.__setattr__(self, "half_v", float(self.half_v))

    @property
    def axis_v(self) -> np.ndarray:
        return np.cross(self.normal, self.axis_u)

    @classmethod
    def box_face(cls, axis: int, value: float, lo, hi) -> "PlaneRect":
        """Axis-aligned rectangle at ``x[axis] = value`` spanning ``lo..hi`` in
        the other two coordinates (in increasing axis order)."""
        others = [i for i in range(3) if i != axis]
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        center = np.zeros(3)
        center[axis] = value
        center[others] = 0.5 * (lo + hi)
        n = np.eye(3)[axis]
        u = np.eye(3)[others[0]]
        half = 0.5 * (hi - lo)
        return cls(center, n, u, half[0], half[1])


def intersect(origins: np.ndarray, dirs: np.ndarray, planes, r_min: float = 0.0,
              r_max: float = np.inf):
    """Nearest ray/rectangle hit per ray.

    Returns ``(range, plane_index)``; rays with no hit inside ``[r_min, r_max]``
    get ``inf`` and ``-1``.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    best = np.full(len(dirs), np.inf)
    idx = np.full(len(dirs), -1, dtype=np.int64)
    for j, pl in enumerate(planes):
        denom = dirs @ pl.normal
        num = (pl.center - origins) @ pl.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            s = num / denom
            ok = (np.abs(denom) > 1e-12) & (s >= r_min) & (s <= r_max)
            rel = origins + s[:, None] * dirs - pl.center
            ok &= np.abs(rel @ pl.axis_u) <= pl.half_u
            ok &= np.abs(rel @ pl.axis_v) <= pl.half_v
        better = ok & (s < best)
        best[better] = s[better]
        idx[better] = j
    return best, idx


# --------------------------------------------------------------------------
# trajectory profiles
# --------------------------------------------------------------------------

def _euler_zyx(angles: np.ndarray) -> np.ndarray:
    """Rz(yaw) Ry(pitch) Rx(roll) for rows of ``(roll, pitch, yaw)``."""
    r, p, y = angles[:, 0], angles[:, 1], angles[:, 2]
    cr, sr, cp, sp, cy, sy = np.cos(r), np.sin(r), np.cos(p), np.sin(p), np.cos(y), np.sin(y)
    R = np.empty((len(angles), 3, 3))
    R[:, 0, 0] = cy * cp
    R[:, 0, 1] = cy * sp * sr - sy * cr
    R[:, 0, 2] = cy * sp * cr + sy * sr
    R[:, 1, 0] = sy * cp
    R[:, 1, 1] = sy * sp * sr + cy * cr
    R[:, 1, 2] = sy * sp * cr - cy * sr
    R[:, 2, 0] = -sp
    R[:, 2, 1] = cp * sr
    R[:, 2, 2] = cp * cr
    return R


@dataclass(frozen=True)
class ConstantVelocity:
    velocity: tuple = (1.0, 0.0, 0.0)
    origin: tuple = (0.0, 0.0, 0.0)
    kind = "constant_velocity"

    def poses(self, t: np.ndarray):
        t = np.asarray(t, dtype=float)
        p = np.asarray(self.origin, float) + np.outer(t, self.velocity)
        return np.broadcast_to(np.eye(3), (len(t), 3, 3)).copy(), p

    def velocities(self, t: np.ndarray) -> np.ndarray:
        return np.tile(np.asarray(self.velocity, float), (len(np.asarray(t)), 1))


@dataclass(frozen=True)
class Circular:
    """Planar circle about ``center`` with the body heading along the tangent."""

    radius: float = 2.0
    rate: float = 0.5
    center: tuple = (0.0, 0.0, 0.0)
    kind = "circular"

    def poses(self, t: np.ndarray):
        t = np.asarray(t, dtype=float)
        th = self.rate * t
        p = np.asarray(self.center, float) + self.radius * np.column_stack(
            [np.cos(th), np.sin(th), np.zeros_like(th)])
        yaw = th + np.pi / 2 * np.sign(self.rate or 1.0)
        R = _euler_zyx(np.column_stack([np.zeros_like(th), np.zeros_like(th), yaw]))
        return R, p

    def velocities(self, t: np.ndarray) -> np.ndarray:
        th = self.rate * np.asarray(t, dtype=float)
        w = self.radius * self.rate
        return np.column_stack([-w * np.sin(th), w * np.cos(th), np.zeros_like(th)])


@dataclass(frozen=True)
class Sinusoidal:
    """Per-axis ``x0 + A (1 - cos(f (t - hold)))`` in position and roll/pitch/yaw.

    The body rests at ``origin`` with identity attitude for ``hold`` seconds
    (the estimator's initial condition) and then starts moving smoothly; the
    ``1 - cos`` form keeps velocity continuous at the start of motion.
    """

    origin: tuple = (-4.0, -2.0, 1.5)
    amplitude: tuple = (4.0, 2.0, 0.3)
    frequency: tuple = (0.5, 0.7, 1.1)
    rot_amplitude: tuple = (0.1, 0.1, 0.8)
    rot_frequency: tuple = (1.5, 1.3, 1.25)
    hold: float = 0.0
    kind = "sinusoidal"

    def _phase(self, t, f):
        tau = np.maximum(np.asarray(t, dtype=float) - self.hold, 0.0)
        return np.outer(tau, np.asarray(f, float))

    def poses(self, t: np.ndarray):
        t = np.asarray(t, dtype=float)
        A = np.asarray(self.amplitude, float)
        p = np.asarray(self.origin, float) + A * (1.0 - np.cos(self._phase(t, self.frequency)))
        ang = np.asarray(self.rot_amplitude, float) * (1.0 - np.cos(self._phase(t, self.rot_frequency)))
        return _euler_zyx(ang), p

    def velocities(self, t: np.ndarray) -> np.ndarray:
        A = np.asarray(self.amplitude, float)
        f = np.asarray(self.frequency, float)
        return A * f * np.sin(self._phase(t, f))


PROFILES = {c.kind: c for c in (ConstantVelocity, Circular, Sinusoidal)}


def make_profile(spec: dict):
    spec = dict(spec)
    kind = spec.pop("profile", spec.pop("kind", None))
    if kind not in PROFILES:
        raise ConfigError(f"unknown trajectory profile {kind!r}; choose from {sorted(PROFILES)}")
    try:
        return PROFILES[kind](**{k: tuple(v) if isinstance(v, list) else v for k, v in spec.items()})
    except TypeError as exc:
        raise ConfigError(f"bad parameters for profile {kind!r}: {exc}") from None


# --------------------------------------------------------------------------
# sensors and scenario
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ScanPattern:
    """Multi-beam scan pattern.

    Ray ``k`` fires at ``k / rays_per_s`` on channel ``k mod channels``. For
    ``kind="spinning"`` the azimuth follows the spin phase at that instant, so
    a short window covers a narrow wedge. ``kind="interleaved"`` steps the
    azimuth by the golden ratio each ray, so any window of a few hundred rays
    already covers the full circle (similar in spirit to non-repetitive
    solid-state scanners).
    """

    rays_per_s: float = 20_000.0
    channels: int = 16
    elevation_deg: tuple = (-15.0, 15.0)
    spin_hz: float = 10.0
    range_std: float = 0.02
    r_min: float = 0.5
    r_max: float = 100.0
    kind: str = "interleaved"

    def __post_init__(self):
        if self.kind not in ("spinning", "interleaved"):
            raise ConfigError(f"unknown scan pattern kind {self.kind!r}")
        if not self.rays_per_s > 0:
            raise ConfigError("rays_per_s must be positive")
        if self.channels < 1:
            raise ConfigError("need at least one channel")
        if self.range_std < 0:
            raise ConfigError("range_std must be non-negative")

    def directions(self, k: np.ndarray) -> np.ndarray:
        t = k / self.rays_per_s
        ch = k % self.channels
        lo, hi = np.radians(self.elevation_deg)
        elev = lo + (hi - lo) * ch / max(self.channels - 1, 1)
        # a small per-channel azimuth offset keeps channels from lining up
        if self.kind == "spinning":
            turn = self.spin_hz * t + ch / (self.channels * 7.0)
        else:
            turn = (k // self.channels) * _GOLDEN + self.spin_hz * t
        az = 2.0 * np.pi * np.mod(turn, 1.0)
        ce = np.cos(elev)
        return np.column_stack([ce * np.cos(az), ce * np.sin(az), np.sin(elev)])


@dataclass(frozen=True)
class LidarSpec:
    extrinsic: LidarExtrinsic = field(default_factory=LidarExtrinsic.identity)
    pattern: ScanPattern = field(default_factory=ScanPattern)


@dataclass(frozen=True)
class Dropout:
    lidar_id: int
    t_on: float
    t_off: float


@dataclass(frozen=True)
class ScenarioConfig:
    planes: tuple
    profile: object
    lidars: tuple
    duration: float
    dropouts: tuple = ()
    seed: int = 0
    name: str = "custom"

    def __post_init__(self):
        if not self.duration > 0:
            raise ConfigError("duration must be positive")
        if not self.lidars:
            raise ConfigError("scenario needs at least one LiDAR")
        for d in self.dropouts:
            if not 0 <= d.lidar_id < len(self.lidars):
                raise ConfigError(f"dropout refers to unknown lidar {d.lidar_id}")

    @property
    def extrinsics(self) -> dict:
        return {i: l.extrinsic for i, l in enumerate(self.lidars)}


def _rot(axis: str, deg: float) -> np.ndarray:
    v = {"x": (1, 0, 0), "y": (0, 1, 0), "z": (0, 0, 1)}[axis]
    return so3.exp(np.radians(deg) * np.asarray(v, dtype=float))


def standard_room_planes() -> tuple:
    """20 x 20 x 5 m room plus two free-standing interior walls."""
    B = PlaneRect.box_face
    return (
        B(2, 0.0, (-10, -10), (10, 10)),   # floor
        B(2, 5.0, (-10, -10), (10, 10)),   # ceiling
        B(0, -10.0, (-10, 0), (10, 5)),
        B(0, 10.0, (-10, 0), (10, 5)),
        B(1, -10.0, (-10, 0), (10, 5)),
        B(1, 10.0, (-10, 0), (10, 5)),
        B(0, 7.0, (-9, 0), (-1, 3)),       # interior wall, x = 7
        B(1, 6.0, (-8, 0), (2, 3)),        # interior wall, y = 6
    )


def parallel_wall_planes(gap: float = 4.0, length: float = 200.0, height: float = 40.0) -> tuple:
    """Two facing walls and nothing else: translation along them is unobservable."""
    half = gap / 2
    return (
        PlaneRect.box_face(1, -half, (-length / 2, -height / 2), (length / 2, height / 2)),
        PlaneRect.box_face(1, half, (-length / 2, -height / 2), (length / 2, height / 2)),
    )


def default_rig(rays_per_s: float = 20_000.0, range_std: float = 0.02) -> tuple:
    """A horizontal and a vertical spinning LiDAR."""
    pat = ScanPattern(rays_per_s=rays_per_s, range_std=range_std)
    horiz = LidarSpec(LidarExtrinsic(np.eye(3), (0.1, 0.0, 0.1)), pat)
    vert = LidarSpec(LidarExtrinsic(_rot("x", 90.0), (-0.1, 0.0, 0.2)), pat)
    return horiz, vert


def standard_room(duration: float = 60.0, seed: int = 0, *, profile=None, rays_per_s: float = 20_000.0,
                  range_std: float = 0.02, dropouts=(), lidars=None) -> ScenarioConfig:
    return ScenarioConfig(
        planes=standard_room_planes(),
        profile=Sinusoidal(hold=0.5) if profile is None else profile,
        lidars=default_rig(rays_per_s, range_std) if lidars is None else tuple(lidars),
        duration=duration,
        dropouts=tuple(dropouts),
        seed=seed,
        name="standard_room",
    )


def parallel_walls(duration: float = 10.0, seed: int = 0, *, rays_per_s: float = 20_000.0,
                   range_std: float = 0.02) -> ScenarioConfig:
    return ScenarioConfig(
        planes=parallel_wall_planes(),
        profile=ConstantVelocity(velocity=(1.0, 0.0, 0.0)),
        lidars=default_rig(rays_per_s, range_std),
        duration=duration,
        seed=seed,
        name="parallel_walls",
    )


PRESETS = {"standard_room": standard_room, "parallel_walls": parallel_walls}


def _vec(x, n=3):
    a = np.asarray(x, dtype=float).reshape(-1)
    if a.shape != (n,):
        raise ConfigError(f"expected {n} numbers, got {x!r}")
    return a


def _lidar_from_dict(d: dict) -> LidarSpec:
    d = dict(d)
    rot = d.pop("rotation_deg", (0.0, 0.0, 0.0))
    R = _euler_zyx(np.radians(_vec(rot))[None, :])[0]
    ext = LidarExtrinsic(R, _vec(d.pop("translation", (0.0, 0.0, 0.0))))
    pattern = d.pop("pattern", {})
    if d:
        raise ConfigError(f"unknown lidar keys {sorted(d)}")
    try:
        return LidarSpec(ext, ScanPattern(**{k: tuple(v) if isinstance(v, list) else v
                                             for k, v in pattern.items()}))
    except TypeError as exc:
        raise ConfigError(f"bad scan pattern: {exc}") from None


def scenario_from_dict(d: dict) -> ScenarioConfig:
    """Build a scenario from plain config data (e.g. parsed YAML).

    ``preset`` picks a named world and rig; explicit ``trajectory``,
    ``lidars``, ``planes`` and scalar keys override it.
    """
    if not isinstance(d, dict):
        raise ConfigError("scenario must be a mapping")
    d = dict(d)
    preset = d.pop("preset", "standard_room")
    if preset not in PRESETS:
        raise ConfigError(f"unknown scenario preset {preset!r}")
    kwargs = {}
    for key in ("duration", "seed", "rays_per_s", "range_std"):
        if key in d:
            kwargs[key] = d.pop(key)
    base = PRESETS[preset](**kwargs)
    profile = make_profile(d.pop("trajectory")) if "trajectory" in d else base.profile
    lidars = tuple(_lidar_from_dict(x) for x in d.pop("lidars")) if "lidars" in d else base.lidars
    planes = base.planes
    if "planes" in d:
        planes = tuple(PlaneRect(_vec(p["center"]), _vec(p["normal"]), _vec(p["axis_u"]),
                                 float(p["half_u"]), float(p["half_v"])) for p in d.pop("planes"))
    dropouts = tuple(Dropout(int(x[0]), float(x[1]), float(x[2])) for x in d.pop("dropouts", ()))
    if d:
        raise ConfigError(f"unknown scenario keys {sorted(d)}")
    return ScenarioConfig(planes, profile, lidars, base.duration, dropouts, base.seed, preset)


# --------------------------------------------------------------------------
# ground truth and ray casting
# --------------------------------------------------------------------------

def gt_pose(profile, t: float, duration: float | None = None) -> Pose:
    t = float(t)
    if t < 0 or (duration is not None and t > duration) or not np.isfinite(t):
        raise OutOfIntervalError(f"time {t} outside [0, {duration}]")
    R, p = profile.poses(np.array([t]))
    return Pose(R[0], p[0], t)


@dataclass
class GroundTruth:
    """Analytic trajectory with its 1 kHz dense sampling."""

    profile: object
    duration: float
    rate: float = GT_RATE

    @property
    def stamps(self) -> np.ndarray:
        n = int(np.floor(self.duration * self.rate + 1e-9)) + 1
        return np.arange(n) / self.rate

    def dense(self):
        """``(stamps, R (N,3,3), t (N,3))`` at the dense rate."""
        s = self.stamps
        R, p = self.profile.poses(s)
        return s, R, p

    def poses(self, stamps):
        s = np.asarray(stamps, dtype=float)
        if s.size and (s.min() < -1e-9 or s.max() > self.duration + 1e-9):
            raise OutOfIntervalError("timestamp outside the ground-truth range")
        return self.profile.poses(s)

    def pose(self, t: float) -> Pose:
        return gt_pose(self.profile, t, self.duration)


@dataclass
class Scan:
    lidar_id: int
    points: np.ndarray
    stamps: np.ndarray
    true_range: np.ndarray
    plane_index: np.ndarray

    def __len__(self) -> int:
        return len(self.stamps)

    def timed_points(self) -> list:
        return [TimedPoint(p, float(s), self.lidar_id) for p, s in zip(self.points, self.stamps)]


def _range_noise(seed: int, lidar_id: int, k: np.ndarray) -> np.ndarray:
    out = np.empty(len(k))
    if not len(k):
        return out
    blocks = k // NOISE_BLOCK
    for b in np.unique(blocks):
        sel = blocks == b
        g = np.random.default_rng([int(seed), int(lidar_id), int(b)]).standard_normal(NOISE_BLOCK)
        out[sel] = g[k[sel] % NOISE_BLOCK]
    return out


def ray_indices(pattern: ScanPattern, t_begin: float, t_end: float) -> np.ndarray:
    lo = int(np.ceil(t_begin * pattern.rays_per_s - 1e-9))
    hi = int(np.ceil(t_end * pattern.rays_per_s - 1e-9))
    return np.arange(max(lo, 0), max(hi, 0), dtype=np.int64)


def cast_scan(scenario: ScenarioConfig, lidar_id: int, t_begin: float, t_end: float) -> Scan:
    """Returns of one LiDAR for rays fired in ``[t_begin, t_end)``.

    Points are in the sensor frame, each cast from the sensor's true pose at
    its own firing time.
    """
    spec = scenario.lidars[lidar_id]
    pat = spec.pattern
    t_begin = max(float(t_begin), 0.0)
    t_end = min(float(t_end), scenario.duration)
    k = ray_indices(pat, t_begin, t_end)
    stamps = k / pat.rays_per_s
    keep = np.ones(len(k), dtype=bool)
    for d in scenario.dropouts:
        if d.lidar_id == lidar_id:
            keep &= ~((stamps >= d.t_on) & (stamps < d.t_off))
    k, stamps = k[keep], stamps[keep]
    empty = Scan(lidar_id, np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int64))
    if not len(k):
        return empty

    Rb, pb = scenario.profile.poses(stamps)
    ext = spec.extrinsic
    Rs = Rb @ ext.rotation
    origin = pb + Rb @ ext.translation
    d_sensor = pat.directions(k)
    d_world = np.einsum("nij,nj->ni", Rs, d_sensor)
    rng_true, plane = intersect(origin, d_world, scenario.planes, pat.r_min, pat.r_max)
    hit = plane >= 0
    if not hit.any():
        return empty
    k, stamps, d_sensor, rng_true, plane = k[hit], stamps[hit], d_sensor[hit], rng_true[hit], plane[hit]
    r = rng_true + pat.range_std * _range_noise(scenario.seed, lidar_id, k) if pat.range_std else rng_true
    return Scan(lidar_id, r[:, None] * d_sensor, stamps, rng_true, plane)


def simulate(scenario: ScenarioConfig, chunk: float = 0.01) -> Iterator[tuple]:
    """Yield ``(t_chunk_end, [Scan per lidar])`` in time order."""
    n = int(np.ceil(scenario.duration / chunk - 1e-9))
    for i in range(n):
        t0 = i * chunk
        t1 = min((i + 1) * chunk, scenario.duration)
        yield t1, [cast_scan(scenario, j, t0, t1) for j in range(len(scenario.lidars))]


def record_stream(scenario: ScenarioConfig, chunk: float = 0.5):
    """All returns as record arrays ``(stamps, lidar_ids, xyz)`` sorted by stamp."""
    S, I, P = [], [], []
    for _, scans in simulate(scenario, chunk):
        for sc in scans:
            S.append(sc.stamps)
            I.append(np.full(len(sc), sc.lidar_id, dtype=np.uint8))
            P.append(sc.points)
    if not S:
        return np.zeros(0), np.zeros(0, dtype=np.uint8), np.zeros((0, 3))
    S, I, P = np.concatenate(S), np.concatenate(I), np.concatenate(P)
    order = np.lexsort((I, S))
    return S[order], I[order], P[order]
