"""Hash-indexed voxel map with streaming Gaussian statistics and plane fits.

Each cell keeps count, mean and the centered second moment (so the sample
covariance is ``M2 / (n - 1)``); batches are merged with the pairwise
(Chan et al.) update, so the statistics do not depend on insertion order or
batching. A cell whose covariance has ``lambda_2 > plane_ratio * lambda_3``
carries a plane (centroid, unit normal).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

_OFF = 1 << 20
_SHIFT_Y = 21
_SHIFT_X = 42
_NEIGHBOR_OFFSETS = np.array([0, 1 << _SHIFT_X, -(1 << _SHIFT_X), 1 << _SHIFT_Y,
                              -(1 << _SHIFT_Y), 1, -1], dtype=np.int64)


@dataclass(frozen=True)
class VoxelMapConfig:
    voxel_size: float = 1.0
    min_points: int = 10
    plane_ratio: float = 9.0
    max_points_per_voxel: int = 50
    refit_growth: float = 0.2
    match_gate: float = 1.0
    # optional bound on the plane thickness (std along the normal, m); None = off
    max_thickness: float | None = None

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if not self.plane_ratio > 1:
            raise ValueError("plane_ratio must exceed 1")
        if self.min_points < 3 or self.max_points_per_voxel < self.min_points:
            raise ValueError("need 3 <= min_points <= max_points_per_voxel")


@dataclass(frozen=True)
class Plane:
    centroid: np.ndarray
    normal: np.ndarray
    planarity: float


@dataclass(frozen=True)
class Voxel:
    key: tuple
    count: int
    mean: np.ndarray
    cov: np.ndarray
    plane: Plane | None


def voxel_key(p, voxel_size: float) -> tuple:
    """Integer cell coordinates ``floor(p / voxel_size)``."""
    k = np.floor(np.asarray(p, dtype=float) / voxel_size).astype(np.int64)
    return tuple(int(x) for x in k)


def voxel_keys(points: np.ndarray, voxel_size: float) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=float) / voxel_size).astype(np.int64)


def encode_keys(keys: np.ndarray) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64) + _OFF
    return (k[..., 0] << _SHIFT_X) | (k[..., 1] << _SHIFT_Y) | k[..., 2]


def decode_keys(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    mask = (1 << 21) - 1
    return np.stack([(codes >> _SHIFT_X) & mask, (codes >> _SHIFT_Y) & mask, codes & mask],
                    axis=-1) - _OFF


def fit_plane(mean: np.ndarray, cov: np.ndarray, count: int, config: VoxelMapConfig,
              viewpoint=None) -> Plane | None:
    """Eigen-analysis plane test for one cell; None when not planar enough."""
    if count < config.min_points:
        return None
    w, V = np.linalg.eigh(cov)
    if not w[1] > config.plane_ratio * max(w[0], 0.0):
        return None
    if config.max_thickness is not None and w[0] > config.max_thickness ** 2:
        return None
    n = V[:, 0]
    n = _orient(n[None], mean[None], None if viewpoint is None else np.asarray(viewpoint)[None])[0]
    planarity = np.inf if w[0] <= 0 else float(w[1] / w[0])
    return Plane(np.array(mean, dtype=float), n, planarity)


def _orient(n: np.ndarray, mu: np.ndarray, viewpoint: np.ndarray | None) -> np.ndarray:
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    if viewpoint is None:
        # deterministic fallback: largest-magnitude component positive
        ref = np.take_along_axis(n, np.abs(n).argmax(axis=1)[:, None], axis=1)[:, 0]
        sign = np.where(ref < 0, -1.0, 1.0)
    else:
        sign = np.where(np.einsum("ij,ij->i", n, viewpoint - mu) < 0, -1.0, 1.0)
    return n * sign[:, None]


class VoxelMap:
    """Append-only voxel map.

    ``insert`` is exclusive; ``match``/``match_batch`` only read and may run
    concurrently between inserts.
    """

    def __init__(self, config: VoxelMapConfig | None = None):
        self.config = config or VoxelMapConfig()
        self._index: dict[int, int] = {}
        cap = 1024
        self._codes = np.zeros(cap, dtype=np.int64)
        self._count = np.zeros(cap, dtype=np.int64)
        self._mean = np.zeros((cap, 3))
        self._m2 = np.zeros((cap, 3, 3))
        self._fit_count = np.zeros(cap, dtype=np.int64)
        self._has_plane = np.zeros(cap, dtype=bool)
        self._centroid = np.zeros((cap, 3))
        self._normal = np.zeros((cap, 3))
        self._planarity = np.zeros(cap)
        self._n = 0
        self._sorted_codes = np.zeros(0, dtype=np.int64)
        self._sorted_idx = np.zeros(0, dtype=np.int64)
        self._snapshot_size = 0

    def __len__(self) -> int:
        return self._n

    @property
    def n_planes(self) -> int:
        return int(self._has_plane[: self._n].sum())

    def _grow(self, need: int) -> None:
        cap = len(self._codes)
        if need <= cap:
            return
        new = max(need, 2 * cap)
        for name in ("_codes", "_count", "_mean", "_m2", "_fit_count", "_has_plane",
                     "_centroid", "_normal", "_planarity"):
            old = getattr(self, name)
            arr = np.zeros((new,) + old.shape[1:], dtype=old.dtype)
            arr[:cap] = old
            setattr(self, name, arr)

    def _slots(self, codes: np.ndarray) -> np.ndarray:
        idx = np.empty(len(codes), dtype=np.int64)
        fresh = []
        for j, c in enumerate(codes.tolist()):
            i = self._index.get(c)
            if i is None:
                i = self._n + len(fresh)
                self._index[c] = i
                fresh.append(c)
            idx[j] = i
        if fresh:
            self._grow(self._n + len(fresh))
            self._codes[self._n:self._n + len(fresh)] = fresh
            self._n += len(fresh)
        return idx

    def insert(self, points: np.ndarray, viewpoint=None) -> int:
        """Absorb world-frame points; returns the number of voxels updated.

        ``viewpoint`` (sensor origin in the world frame) orients refit normals.
        """
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        pts = pts[np.all(np.isfinite(pts), axis=1)]
        if len(pts) == 0:
            return 0
        cfg = self.config
        codes = encode_keys(voxel_keys(pts, cfg.voxel_size))
        order = np.argsort(codes, kind="stable")
        codes, pts = codes[order], pts[order]
        uniq, start, counts = np.unique(codes, return_index=True, return_counts=True)
        slot = self._slots(uniq)

        # cap absorption at max_points_per_voxel (first arrivals win)
        room = np.maximum(cfg.max_points_per_voxel - self._count[slot], 0)
        grp = np.repeat(np.arange(len(uniq)), counts)
        rank = np.arange(len(pts)) - np.repeat(start, counts)
        keep = rank < room[grp]
        if not keep.any():
            return 0
        pts, grp = pts[keep], grp[keep]
        nb = np.bincount(grp, minlength=len(uniq))
        live = nb > 0
        slot, nb = slot[live], nb[live]
        grp = np.cumsum(live)[grp] - 1
        bounds = np.r_[0, np.cumsum(nb)[:-1]]

        mean_b = np.add.reduceat(pts, bounds, axis=0) / nb[:, None]
        d = pts - mean_b[grp]
        m2_b = np.add.reduceat(d[:, :, None] * d[:, None, :], bounds, axis=0)

        na = self._count[slot].astype(float)
        n = na + nb
        delta = mean_b - self._mean[slot]
        self._mean[slot] += delta * (nb / n)[:, None]
        self._m2[slot] += m2_b + delta[:, :, None] * delta[:, None, :] * (na * nb / n)[:, None, None]
        self._count[slot] = n.astype(np.int64)
        self._refit(slot, viewpoint)
        return len(slot)

    def _refit(self, slot: np.ndarray, viewpoint) -> None:
        cfg = self.config
        cnt = self._count[slot]
        fc = self._fit_count[slot]
        due = (cnt >= cfg.min_points) & (
            (fc == 0) | (cnt >= (1.0 + cfg.refit_growth) * fc)
            | ((cnt >= cfg.max_points_per_voxel) & (fc < cnt)))
        s = slot[due]
        if len(s) == 0:
            return
        cov = self._m2[s] / (self._count[s] - 1)[:, None, None]
        w, V = np.linalg.eigh(cov)
        ok = w[:, 1] > cfg.plane_ratio * np.maximum(w[:, 0], 0.0)
        if cfg.max_thickness is not None:
            ok &= w[:, 0] <= cfg.max_thickness ** 2
        mu = self._mean[s]
        vp = None if viewpoint is None else np.broadcast_to(np.asarray(viewpoint, float), mu.shape)
        n = _orient(V[:, :, 0], mu, vp)
        self._fit_count[s] = self._count[s]
        self._has_plane[s] = ok
        self._centroid[s] = mu
        self._normal[s] = n
        with np.errstate(divide="ignore"):
            self._planarity[s] = np.where(w[:, 0] > 0, w[:, 1] / np.where(w[:, 0] > 0, w[:, 0], 1), np.inf)

    # -- queries ---------------------------------------------------------

    def voxel(self, key) -> Voxel | None:
        i = self._index.get(int(encode_keys(np.asarray(key))))
        if i is None:
            return None
        n = int(self._count[i])
        cov = self._m2[i] / (n - 1) if n >= 2 else np.zeros((3, 3))
        plane = (Plane(self._centroid[i].copy(), self._normal[i].copy(), float(self._planarity[i]))
                 if self._has_plane[i] else None)
        return Voxel(tuple(int(x) for x in decode_keys(self._codes[i])), n,
                     self._mean[i].copy(), cov, plane)

    def voxels(self):
        for i in range(self._n):
            yield self.voxel(decode_keys(self._codes[i]))

    def _snapshot(self):
        if self._snapshot_size != self._n:
            order = np.argsort(self._codes[: self._n], kind="stable")
            self._sorted_codes = self._codes[: self._n][order]
            self._sorted_idx = order
            self._snapshot_size = self._n
        return self._sorted_codes, self._sorted_idx

    def _lookup(self, codes: np.ndarray) -> np.ndarray:
        sc, si = self._snapshot()
        if len(sc) == 0:
            return np.full(codes.shape, -1, dtype=np.int64)
        pos = np.searchsorted(sc, codes)
        pos_c = np.minimum(pos, len(sc) - 1)
        hit = sc[pos_c] == codes
        return np.where(hit, si[pos_c], -1)

    def _match_indices(self, pts: np.ndarray):
        N = len(pts)
        if N == 0 or self._n == 0:
            return np.zeros(N, dtype=bool), np.full(N, -1, dtype=np.int64)
        codes = encode_keys(voxel_keys(pts, self.config.voxel_size))
        cand = self._lookup(codes[:, None] + _NEIGHBOR_OFFSETS[None, :])  # (N, 7)
        safe = np.maximum(cand, 0)
        planar = (cand >= 0) & self._has_plane[safe]
        dist = np.linalg.norm(self._centroid[safe] - pts[:, None, :], axis=2)
        dist = np.where(planar, dist, np.inf)
        # the containing cell wins whenever it is planar
        dist[:, 0] = np.where(planar[:, 0], -1.0, np.inf)
        best = dist.argmin(axis=1)
        rows = np.arange(N)
        ok = np.isfinite(dist[rows, best])
        sel = np.where(ok, cand[rows, best], -1)
        s = np.maximum(sel, 0)
        ok &= np.abs(np.einsum("ij,ij->i", self._normal[s], pts - self._centroid[s])) \
            <= self.config.match_gate
        return ok, np.where(ok, sel, -1)

    def match_batch(self, points: np.ndarray):
        """Vectorized correspondence search.

        Returns ``(found (N,), centroids (N,3), normals (N,3))``; rows where
        ``found`` is False are zero.
        """
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        ok, sel = self._match_indices(pts)
        s = np.maximum(sel, 0)
        cen = np.where(ok[:, None], self._centroid[s], 0.0)
        nor = np.where(ok[:, None], self._normal[s], 0.0)
        return ok, cen, nor

    def match(self, p_world) -> Plane | None:
        ok, sel = self._match_indices(np.asarray(p_world, dtype=float).reshape(1, 3))
        if not ok[0]:
            return None
        i = sel[0]
        return Plane(self._centroid[i].copy(), self._normal[i].copy(), float(self._planarity[i]))

    def plane_table(self) -> np.ndarray:
        """Rows ``x y z nx ny nz count`` for every planar voxel, sorted by key."""
        idx = np.flatnonzero(self._has_plane[: self._n])
        idx = idx[np.argsort(self._codes[idx], kind="stable")]
        return np.column_stack([self._centroid[idx], self._normal[idx], self._count[idx]])

    def export_planes(self, path) -> int:
        table = self.plane_table()
        with open(Path(path), "w", encoding="ascii") as fh:
            fh.write("# x y z nx ny nz count\n")
            for row in table:
                fh.write("%.6f %.6f %.6f %.6f %.6f %.6f %d\n" % (*row[:6], int(row[6])))
        return len(table)
