"""End-to-end odometry loop: sync, sample, register, map.

Frames come out of the synchronizer on a fixed grid. For each frame the GP
state is predicted to the frame start, a localizability-driven subset of the
points is matched against the voxel map, the iterated Kalman update refines
the state, and every frame point is inserted into the map at its posterior
continuous-time pose.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import so3
from .config import RunConfig
from .estimator import kalman_update, residual_rows
from .evaluate import align_first
from .sampling import localizability_sample
from .sim import GT_RATE, GroundTruth, cast_scan
from .stream import read_stream
from .sync import FrameQueue, SyncFrame, Synchronizer
from .trajectory import GpState, propagate, query_poses
from .voxelmap import VoxelMap

log = logging.getLogger(__name__)


@dataclass
class FrameRecord:
    index: int
    t_start: float
    t_end: float
    points_in: int
    points_selected: int
    matched: int
    lidars: list
    registered: bool
    sampling_degenerate: list | None = None
    iterations: int = 0
    converged: bool = False
    tikhonov: bool = False
    estimator_degenerate: bool = False
    residual_rms: float | None = None

    def as_dict(self) -> dict:
        return {"type": "frame", **self.__dict__}


@dataclass
class FrameDiagnostics:
    """In-memory per-frame extras not written to the metrics file."""

    translation_eigvecs: np.ndarray | None = None
    rotation: np.ndarray | None = None


@dataclass
class RunMetrics:
    ate_rmse: float | None
    dense_max_error: float | None
    frame_time: np.ndarray
    estimate_time: np.ndarray
    dt: float
    frames_emitted: int
    frames_dropped: int
    frames: list
    duration: float

    @property
    def efficiency(self) -> float:
        return float(np.mean(self.frame_time / self.dt)) if len(self.frame_time) else 0.0

    @property
    def points_in(self) -> np.ndarray:
        return np.array([f.points_in for f in self.frames])

    @property
    def points_selected(self) -> np.ndarray:
        return np.array([f.points_selected for f in self.frames])

    @property
    def selected_fraction(self) -> float:
        total = self.points_in.sum()
        return float(self.points_selected.sum() / total) if total else 0.0

    def summary(self) -> dict:
        """Deterministic summary (no wall-clock values)."""
        regs = [f for f in self.frames if f.registered]
        return {
            "type": "summary",
            "ate_rmse": self.ate_rmse,
            "dense_max_error": self.dense_max_error,
            "frames_emitted": self.frames_emitted,
            "frames_dropped": self.frames_dropped,
            "frames_registered": len(regs),
            "duration": self.duration,
            "dt": self.dt,
            "points_in": int(self.points_in.sum()),
            "points_selected": int(self.points_selected.sum()),
            "selected_fraction": self.selected_fraction,
            "tikhonov_frames": sum(f.tikhonov for f in self.frames),
            "nonconverged_frames": sum(1 for f in regs if not f.converged),
        }


@dataclass
class RunResult:
    metrics: RunMetrics
    stamps: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray
    dense: tuple | None
    voxel_map: VoxelMap
    diagnostics: list = field(default_factory=list)
    truth: GroundTruth | None = None


class Odometry:
    """Stateful per-frame estimator."""

    def __init__(self, config: RunConfig, t0: float):
        self.cfg = config
        self.state = GpState.initial(t0, config.initial_variances)
        self.t0 = t0
        self.map = VoxelMap(config.voxel)
        self.weight = 1.0 / config.estimator.point_std ** 2

    def _matcher(self, pts, stamps):
        ecfg = self.cfg.estimator
        cache = {}

        def rematch(state):
            R, t = query_poses(state, stamps)
            world = np.einsum("nij,nj->ni", R, pts) + t
            found, c, n = self.map.match_batch(world)
            if found.sum() < ecfg.min_matches and "idx" in cache:
                return
            cache.update(idx=np.flatnonzero(found), c=c[found], n=n[found],
                         R=state.rotation, t=state.translation)

        def moved(state):
            dt = np.linalg.norm(state.translation - cache["t"])
            dr = np.linalg.norm(so3.log(cache["R"].T @ state.rotation))
            return dt > ecfg.rematch_translation or dr > ecfg.rematch_rotation

        def measure(state):
            if "idx" not in cache or moved(state):
                rematch(state)
            i = cache["idx"]
            h, H = residual_rows(state, pts[i], stamps[i], cache["c"], cache["n"])
            return h, H, np.full(len(h), self.weight)

        return rematch, cache, measure

    def process(self, frame: SyncFrame, index: int):
        cfg = self.cfg
        t_start = time.perf_counter()
        self.state = propagate(self.state, frame.t_start - self.state.t_ref, cfg.process_noise)
        rec = FrameRecord(index, frame.t_start, frame.t_end, len(frame), 0, 0,
                          sorted(frame.contributing_lidars), False)
        diag = FrameDiagnostics()
        pts, stamps = frame.points, frame.stamps

        seeding = frame.t_start < self.t0 + cfg.bootstrap_time - 1e-9
        if len(frame) and self.map.n_planes > 0 and not seeding:
            idx = np.arange(len(frame))
            if cfg.sampling.enabled:
                sel, table = localizability_sample(
                    pts, stamps, frame.t_start, self.state, cfg.sampling.threshold,
                    k=cfg.sampling.k, count_new_only=cfg.sampling.count_new_only,
                    proxy_threshold=cfg.sampling.proxy_threshold,
                    max_thickness=cfg.sampling.normal_max_thickness,
                    min_planarity=cfg.sampling.normal_min_planarity)
                idx = sel.indices
                rec.sampling_degenerate = [bool(x) for x in sel.degenerate]
                if table is not None:
                    diag.translation_eigvecs = table.eigvecs_t
            rec.points_selected = len(idx)
            rematch, cache, measure = self._matcher(pts[idx], stamps[idx])
            rematch(self.state)
            rec.matched = len(cache["idx"])
            if rec.matched >= cfg.estimator.min_matches:
                post, report = kalman_update(self.state, measure, max_iter=cfg.estimator.max_iter,
                                             eps=cfg.estimator.eps,
                                             degeneracy_tol=cfg.estimator.degeneracy_tol)
                self.state = post
                rec.registered = True
                rec.matched = report.n_rows
                rec.iterations = report.iterations
                rec.converged = report.converged
                rec.tikhonov = report.tikhonov
                rec.estimator_degenerate = report.degenerate
                rec.residual_rms = report.final_residual_rms
        else:
            rec.points_selected = len(frame) if not cfg.sampling.enabled else 0
        t_est = time.perf_counter()

        if len(frame):
            R, t = query_poses(self.state, stamps)
            world = np.einsum("nij,nj->ni", R, pts) + t
            self.map.insert(world, viewpoint=self.state.translation)
        t_done = time.perf_counter()
        diag.rotation = self.state.rotation
        return rec, diag, t_done - t_start, t_est - t_start


def grid_time(t0: float, k: int, dt: float) -> float:
    """Frame boundary ``t0 + k dt`` snapped to 1 ns so ``70 * 0.01`` is 0.7."""
    return t0 + round(k * dt, 9)


def _scenario_source(scen, dt):
    n = int(np.ceil(scen.duration / dt - 1e-9))
    for i in range(n):
        t0, t1 = grid_time(0.0, i, dt), min(grid_time(0.0, i + 1, dt), scen.duration)
        yield t1, [(j, s.points, s.stamps) for j in range(len(scen.lidars))
                   if len(s := cast_scan(scen, j, t0, t1))]


def _stream_source(records, t0, dt):
    stamps = records["stamp"]
    if not len(stamps):
        return
    order = np.argsort(stamps, kind="stable")
    records = records[order]
    stamps = records["stamp"]
    bins = np.floor((stamps - t0) / dt + 1e-9).astype(np.int64)
    cuts = np.flatnonzero(np.diff(bins)) + 1
    for chunk in np.split(np.arange(len(records)), cuts):
        r = records[chunk]
        out = []
        for lid in np.unique(r["lidar_id"]):
            m = r["lidar_id"] == lid
            out.append((int(lid), r["xyz"][m].astype(float), r["stamp"][m]))
        yield grid_time(t0, int(bins[chunk[0]]) + 1, dt), out


def run(config: RunConfig, *, progress=None) -> RunResult:
    """Run the full pipeline and return estimates plus metrics."""
    dt = config.dt
    if config.scenario is not None:
        scen = config.scenario
        extrinsics = scen.extrinsics
        t0, t_final = 0.0, scen.duration
        source = _scenario_source(scen, dt)
    else:
        extrinsics, records = read_stream(config.stream)
        if len(records):
            t0, t_final = float(records["stamp"].min()), float(records["stamp"].max()) + 1e-9
        else:
            t0, t_final = 0.0, 0.0
        source = _stream_source(records, t0, dt)

    gt_scen = config.ground_truth
    truth = GroundTruth(gt_scen.profile, gt_scen.duration) if gt_scen is not None else None

    sync = Synchronizer(extrinsics, dt, r_min=config.r_min, r_max=config.r_max)
    queue = FrameQueue(config.queue_limit)
    odo = Odometry(config, t0)
    n_frames = int(np.ceil((t_final - t0) / dt - 1e-9))

    stamps = [t0]
    rots = [odo.state.rotation]
    trans = [odo.state.translation]
    dense_s, dense_R, dense_t = [], [], []
    frames, diags, ft, et = [], [], [], []
    k = 0

    def drain():
        while len(queue):
            frame = queue.pop()
            rec, diag, t_all, t_est = odo.process(frame, len(frames))
            frames.append(rec)
            diags.append(diag)
            ft.append(t_all)
            et.append(t_est)
            R_end, t_end = query_poses(odo.state, [frame.t_end])
            stamps.append(frame.t_end)
            rots.append(R_end[0])
            trans.append(t_end[0])
            if config.dense_traj:
                g = np.arange(np.ceil(frame.t_start * GT_RATE - 1e-6),
                              np.ceil(frame.t_end * GT_RATE - 1e-6)) / GT_RATE
                if len(g):
                    R, t = query_poses(odo.state, g)
                    dense_s.append(g)
                    dense_R.append(R)
                    dense_t.append(t)
            if progress is not None:
                progress(len(frames), n_frames)

    def cut(final: bool):
        nonlocal k
        while k < n_frames:
            ts, te = grid_time(t0, k, dt), grid_time(t0, k + 1, dt)
            frame = sync.pop_frame(ts, te - ts)
            if frame is None:
                if final:
                    raise RuntimeError("synchronizer not ready after finish()")
                break
            queue.push(frame)
            k += 1
            drain()

    for t_mark, chunks in source:
        for lid, p, s in chunks:
            sync.ingest(lid, p, s)
        sync.mark_time(t_mark)
        cut(False)
    sync.finish()
    cut(True)

    stamps = np.array(stamps)
    rots = np.stack(rots)
    trans = np.stack(trans)
    dense = None
    if config.dense_traj and dense_s:
        dense = (np.concatenate(dense_s), np.concatenate(dense_R), np.concatenate(dense_t))

    ate = dense_err = None
    if truth is not None and len(stamps) >= 2:
        R_gt, t_gt = truth.poses(stamps)
        _, t_al = align_first(rots, trans, R_gt[0], t_gt[0])
        err = np.linalg.norm(t_al - t_gt, axis=1)
        ate = float(np.sqrt(np.mean(err[1:] ** 2)))
        if dense is not None:
            dense_err = float(dense_errors(dense, stamps[0], rots[0], trans[0], truth).max())

    metrics = RunMetrics(ate, dense_err, np.array(ft), np.array(et), dt, len(frames),
                         queue.dropped, frames, float(t_final - t0))
    return RunResult(metrics, stamps, rots, trans, dense, odo.map, diags, truth)


def dense_errors(dense, t_anchor_stamp, R_anchor, t_anchor, truth) -> np.ndarray:
    """Errors of dense poses, aligned with the same anchor as the frame trajectory."""
    s, R, t = dense
    R_gt0, t_gt0 = truth.poses([t_anchor_stamp])
    R_al = R_gt0[0] @ R_anchor.T
    t_al = t_gt0[0] - R_al @ t_anchor
    _, t_gt = truth.poses(s)
    return np.linalg.norm(t @ R_al.T + t_al - t_gt, axis=1)
