"""Decentralized multi-LiDAR synchronization.

Each LiDAR feeds an independent point-stream buffer. Frames are cut on a fixed
time grid ``[t_k, t_k + dt)`` shared by all sensors, so there is no primary
LiDAR: a frame is complete once every *live* sensor has streamed past its end,
and a sensor that has been silent for ``stale_timeout`` stops gating.
"""
from __future__ import annotations

import logging
import threading
from collections import deque
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TimedPoint:
    p: np.ndarray
    stamp: float
    lidar_id: int


@dataclass(frozen=True)
class LidarExtrinsic:
    """Sensor-to-body rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-6 or abs(np.linalg.det(R) - 1) > 1e-6:
            raise ValueError("extrinsic rotation is not a proper rotation")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "LidarExtrinsic":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=float) @ self.rotation.T + self.translation


@dataclass
class SyncFrame:
    t_start: float
    t_end: float
    points: np.ndarray
    stamps: np.ndarray
    lidar_ids: np.ndarray
    contributing_lidars: frozenset = frozenset()

    @property
    def is_empty(self) -> bool:
        return len(self.stamps) == 0

    def __len__(self) -> int:
        return len(self.stamps)

    def timed_points(self) -> list:
        return [TimedPoint(p, float(s), int(i))
                for p, s, i in zip(self.points, self.stamps, self.lidar_ids)]


@dataclass
class _Buffer:
    extrinsic: LidarExtrinsic
    lock: threading.Lock = field(default_factory=threading.Lock)
    pts: list = field(default_factory=list)
    stamps: list = field(default_factory=list)
    latest: float = -np.inf
    consumed_until: float = -np.inf
    dropped_late: int = 0
    dropped_range: int = 0
    accepted: int = 0


class Synchronizer:
    """Per-LiDAR stream buffers merged into fixed-interval frames.

    Args:
        extrinsics: sensor-to-body transform per LiDAR id.
        dt: frame length in seconds.
        r_min, r_max: accepted sensor range; other returns are dropped.
        stale_timeout: silence after which a LiDAR no longer gates readiness
            (defaults to ``2 * dt``).
        max_disorder: tolerated out-of-order lag within one stream (defaults
            to ``dt``); readiness waits this long past a frame's end.
    """

    def __init__(self, extrinsics: dict, dt: float = 0.01, *, r_min: float = 0.5,
                 r_max: float = 200.0, stale_timeout: float | None = None,
                 max_disorder: float | None = None):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.dt = float(dt)
        self.r_min, self.r_max = float(r_min), float(r_max)
        self.stale_timeout = 2.0 * self.dt if stale_timeout is None else float(stale_timeout)
        self.max_disorder = self.dt if max_disorder is None else float(max_disorder)
        self._buffers = {int(k): _Buffer(e) for k, e in extrinsics.items()}
        self._clock = -np.inf
        self._finished = False

    @property
    def lidar_ids(self):
        return sorted(self._buffers)

    def stats(self) -> dict:
        return {k: {"accepted": b.accepted, "dropped_late": b.dropped_late,
                    "dropped_range": b.dropped_range} for k, b in self._buffers.items()}

    def ingest(self, lidar_id: int, points, stamps) -> int:
        """Transform sensor-frame returns to the body frame and buffer them.

        Returns the number of accepted points.
        """
        try:
            buf = self._buffers[int(lidar_id)]
        except KeyError:
            raise KeyError(f"unknown lidar id {lidar_id}") from None
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        st = np.asarray(stamps, dtype=float).reshape(-1)
        if len(pts) != len(st):
            raise ValueError("points and stamps differ in length")
        rng = np.linalg.norm(pts, axis=1)
        ok = np.isfinite(rng) & np.isfinite(st) & (rng >= self.r_min) & (rng <= self.r_max)
        body = buf.extrinsic.apply(pts[ok])
        st = st[ok]
        with buf.lock:
            buf.dropped_range += int((~ok).sum())
            horizon = max(buf.latest - self.max_disorder, buf.consumed_until)
            late = st < horizon
            if late.any():
                buf.dropped_late += int(late.sum())
                log.debug("lidar %s: dropped %d late points", lidar_id, int(late.sum()))
                body, st = body[~late], st[~late]
            if len(st):
                buf.pts.append(body)
                buf.stamps.append(st)
                buf.latest = max(buf.latest, float(st.max()))
                buf.accepted += len(st)
        return len(st)

    def mark_time(self, t: float) -> None:
        """Declare that wall/sensor time has reached ``t`` (lets silent rigs
        emit empty frames)."""
        self._clock = max(self._clock, float(t))

    def finish(self) -> None:
        """End of input: every remaining window is complete."""
        self._finished = True

    def now(self) -> float:
        latest = max((b.latest for b in self._buffers.values()), default=-np.inf)
        return max(latest, self._clock)

    def is_ready(self, t_end: float) -> bool:
        if self._finished:
            return True
        now = self.now()
        if now < t_end + self.max_disorder:
            return False
        for b in self._buffers.values():
            live = np.isfinite(b.latest) and now - b.latest <= self.stale_timeout
            if live and b.latest < t_end + self.max_disorder:
                return False
        return True

    def pop_frame(self, t_start: float, dt: float | None = None):
        """Cut the window ``[t_start, t_start + dt)``.

        Returns None when not ready yet; an empty :class:`SyncFrame` is the
        marker for a window with no points.
        """
        dt = self.dt if dt is None else float(dt)
        if dt <= 0:
            raise ValueError("dt must be positive")
        t_end = t_start + dt
        if not self.is_ready(t_end):
            return None
        pts, sts, ids = [], [], []
        for lid in sorted(self._buffers):
            b = self._buffers[lid]
            with b.lock:
                if not b.stamps:
                    b.consumed_until = max(b.consumed_until, t_end)
                    continue
                P = np.concatenate(b.pts)
                S = np.concatenate(b.stamps)
                take = (S >= t_start) & (S < t_end)
                keep = S >= t_end
                stale = ~(take | keep)
                if stale.any():
                    b.dropped_late += int(stale.sum())
                b.pts = [P[keep]] if keep.any() else []
                b.stamps = [S[keep]] if keep.any() else []
                b.consumed_until = max(b.consumed_until, t_end)
            if take.any():
                pts.append(P[take])
                sts.append(S[take])
                ids.append(np.full(int(take.sum()), lid, dtype=np.int64))
        if not sts:
            return SyncFrame(t_start, t_end, np.zeros((0, 3)), np.zeros(0),
                             np.zeros(0, dtype=np.int64), frozenset())
        P = np.concatenate(pts)
        S = np.concatenate(sts)
        I = np.concatenate(ids)
        order = np.argsort(S, kind="stable")
        return SyncFrame(t_start, t_end, P[order], S[order], I[order],
                         frozenset(int(i) for i in np.unique(I)))

    def pending(self) -> int:
        return sum(sum(len(s) for s in b.stamps) for b in self._buffers.values())


class FrameQueue:
    """Bounded FIFO between synchronization and estimation; drops oldest."""

    def __init__(self, limit: int = 10):
        self.limit = int(limit)
        self._q = deque()
        self.dropped = 0

    def push(self, frame: SyncFrame) -> None:
        self._q.append(frame)
        while len(self._q) > self.limit:
            old = self._q.popleft()
            self.dropped += 1
            log.warning("estimation lagging: dropped frame [%.3f, %.3f)", old.t_start, old.t_end)

    def pop(self):
        return self._q.popleft() if self._q else None

    def __len__(self) -> int:
        return len(self._q)
