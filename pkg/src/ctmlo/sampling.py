"""Localizability-aware point selection.

Per frame: estimate local normals, approximate the translational and
rotational blocks of the registration Hessian without map correspondences,
project per-point information rows onto the Hessian eigenvectors, then walk
each of the six eigen-directions in descending contribution until the
accumulated score exceeds the threshold.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import so3
from .errors import DegenerateInputError
from .parallel import worker_count
from .trajectory import GpState
from .voxelmap import encode_keys, voxel_keys


@dataclass(frozen=True)
class NormalEstimate:
    n: np.ndarray
    valid: bool


@dataclass(frozen=True)
class Normals:
    """Batch of normal estimates (arrays aligned with the input points)."""

    n: np.ndarray
    valid: np.ndarray

    def __len__(self) -> int:
        return len(self.valid)

    def __getitem__(self, i) -> NormalEstimate:
        return NormalEstimate(self.n[i], bool(self.valid[i]))


def _knn_normals(points: np.ndarray, k: int, min_ratio: float, max_thickness: float = np.inf,
                 min_planarity: float = 0.0):
    _, idx = cKDTree(points).query(points, k=k, workers=worker_count())
    nb = points[idx]
    d = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("mki,mkj->mij", d, d) / k
    w, V = np.linalg.eigh(cov)
    n = V[:, :, 0]
    valid = w[:, 1] >= min_ratio * np.maximum(w[:, 0], 0.0)
    valid &= (w[:, 1] > 0) & (w[:, 0] <= max_thickness ** 2) & (w[:, 1] >= min_planarity * w[:, 2])
    return n, valid


def estimate_normals(points, k: int = 10, *, min_ratio: float = 2.0,
                     proxy_threshold: int = 50_000, proxy_leaf: float = 0.5,
                     max_thickness: float = np.inf, min_planarity: float = 0.0) -> Normals:
    """Plane-fit normals over the ``k`` nearest neighbours (self included).

    A normal is invalid when fewer than ``k`` points exist or the neighbourhood
    is not plane-like (``lambda_2 / lambda_3 < min_ratio``). A finite
    ``max_thickness`` also rejects neighbourhoods whose out-of-plane spread
    (``sqrt(lambda_3)``) exceeds it; in sparse clouds these straddle two
    surfaces and yield a confident but wrong normal. Above
    ``proxy_threshold`` points, normals come from a voxel-centroid proxy
    cloud and are copied to each raw point from its nearest proxy point.
    """
    if k < 3:
        raise ValueError("k must be at least 3")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    M = len(pts)
    if M < k:
        return Normals(np.zeros((M, 3)), np.zeros(M, dtype=bool))
    if M <= proxy_threshold:
        n, valid = _knn_normals(pts, k, min_ratio, max_thickness, min_planarity)
        return Normals(n, valid)
    codes = encode_keys(voxel_keys(pts, proxy_leaf))
    _, inv, cnt = np.unique(codes, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    proxy = np.column_stack([np.bincount(inv, weights=pts[:, i], minlength=len(cnt))
                             for i in range(3)]) / cnt[:, None]
    if len(proxy) < k:
        return Normals(np.zeros((M, 3)), np.zeros(M, dtype=bool))
    pn, pvalid = _knn_normals(proxy, k, min_ratio, max_thickness, min_planarity)
    _, near = cKDTree(proxy).query(pts, k=1, workers=worker_count())
    return Normals(pn[near], pvalid[near])


@dataclass(frozen=True)
class ContributionTable:
    """Per-point contributions to the six Hessian eigen-directions.

    Columns 0-2 follow ``eigvecs_t`` (ascending eigenvalues), 3-5 follow
    ``eigvecs_R``. ``index`` maps table rows to input point indices.
    """

    C: np.ndarray
    eigvecs_t: np.ndarray
    eigvecs_R: np.ndarray
    eigvals_t: np.ndarray
    eigvals_R: np.ndarray
    index: np.ndarray


@dataclass(frozen=True)
class Selection:
    indices: np.ndarray
    scores: np.ndarray
    degenerate: np.ndarray


def approximate_hessians(points, normals, state: GpState, dt_per_point):
    """Return ``(A_tt, A_RR, N_tt, N_RR)`` from local normals.

    ``p_bar = exp(omega dt) p + 0.5 a dt^2``; the map normal is approximated
    by the rotated local normal.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    nrm = np.asarray(normals, dtype=float).reshape(-1, 3)
    dt = np.asarray(dt_per_point, dtype=float).reshape(-1)
    R = state.rotation
    p_bar = np.einsum("nij,nj->ni", so3.exp_batch(np.outer(dt, state.omega)), pts) \
        + 0.5 * np.outer(dt * dt, state.acc)
    N_tt = nrm @ R.T
    A_tt = N_tt.T @ N_tt
    u = np.cross(p_bar, nrm)
    A_RR = u.T @ u
    norm2 = np.einsum("ij,ij->i", u, u)
    usable = np.sqrt(norm2) >= 1e-6
    N_RR = np.zeros_like(u)
    N_RR[usable] = u[usable] / norm2[usable, None]
    return A_tt, A_RR, N_tt, N_RR


def build_contributions(points, normals, state: GpState, dt_per_point) -> ContributionTable:
    """Contribution table ``C = [|N_tt V_tt|, |N_RR V_RR|]`` for valid points.

    ``normals`` is a :class:`Normals` batch (invalid entries are skipped) or a
    plain ``(M, 3)`` array of already-filtered normals.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    dt = np.asarray(dt_per_point, dtype=float).reshape(-1)
    if isinstance(normals, Normals):
        keep = np.flatnonzero(normals.valid)
        nrm = normals.n[keep]
    else:
        nrm = np.asarray(normals, dtype=float).reshape(-1, 3)
        keep = np.arange(len(nrm))
    if len(keep) < 6:
        raise DegenerateInputError(f"need at least 6 points with valid normals, got {len(keep)}")
    A_tt, A_RR, N_tt, N_RR = approximate_hessians(pts[keep], nrm, state, dt[keep])
    wt, Vt = np.linalg.eigh(A_tt)
    wr, Vr = np.linalg.eigh(A_RR)
    C = np.hstack([np.abs(N_tt @ Vt), np.abs(N_RR @ Vr)])
    return ContributionTable(C, Vt, Vr, wt, wr, keep)


def _ranked_prefix(col: np.ndarray, s: float, chosen, first: int = 256):
    """Leading part of the descending ranking of ``col`` (ties by index).

    Sorting only the top candidates (all values tied with the cut included)
    reproduces the head of the full ranking, so the search widens until the
    running sum crosses ``s`` or the column is exhausted. Returns
    ``(order, cumsum, stop)`` with ``stop`` None when ``s`` is never exceeded.
    """
    M = len(col)
    K = min(M, first)
    while True:
        if K < M:
            cut = np.partition(col, M - K)[M - K]
            cand = np.flatnonzero(col >= cut)
        else:
            cand = np.arange(M)
        order = cand[np.lexsort((cand, -col[cand]))]
        gain = col[order] if chosen is None else col[order] * ~chosen[order]
        csum = np.cumsum(gain)
        over = np.flatnonzero(csum > s)
        if len(over):
            return order, csum, int(over[0]) + 1
        if K >= M:
            return order, csum, None
        K = min(M, 4 * K)


def select_points(table: ContributionTable, s: float, *, count_new_only: bool = False) -> Selection:
    """Greedy per-direction selection.

    For each direction, points are visited in descending contribution (ties by
    ascending index), added if absent, and the running score grows by every
    visited point's contribution until it exceeds ``s``. A direction whose
    total contribution never exceeds ``s`` consumes its whole ranking and is
    flagged degenerate. With ``count_new_only`` only points first added by
    this direction count towards its score.

    Returns selected *input* point indices (ascending).
    """
    if not s >= 0:
        raise ValueError("threshold must be non-negative")
    C = table.C
    M = len(C)
    chosen = np.zeros(M, dtype=bool)
    scores = np.zeros(6)
    degenerate = np.zeros(6, dtype=bool)
    for d in range(6):
        order, csum, stop = _ranked_prefix(C[:, d], s, chosen if count_new_only else None)
        if stop is None:
            stop = M
            degenerate[d] = True
        chosen[order[:stop]] = True
        scores[d] = csum[stop - 1] if stop else 0.0
    return Selection(np.sort(table.index[chosen]), scores, degenerate)


def localizability_sample(points, stamps, t_start: float, state: GpState, threshold: float,
                          *, k: int = 10, count_new_only: bool = False,
                          proxy_threshold: int = 50_000, max_thickness: float = np.inf,
                          min_planarity: float = 0.0):
    """Full per-frame sampling pass; returns ``(Selection, ContributionTable | None)``.

    Falls back to selecting everything (all directions flagged) when too few
    valid normals exist.
    """
    pts = np.asarray(points, dtype=float)
    normals = estimate_normals(pts, k, proxy_threshold=proxy_threshold,
                               max_thickness=max_thickness, min_planarity=min_planarity)
    try:
        table = build_contributions(pts, normals, state, np.asarray(stamps) - t_start)
    except DegenerateInputError:
        return Selection(np.arange(len(pts)), np.zeros(6), np.ones(6, dtype=bool)), None
    return select_points(table, threshold, count_new_only=count_new_only), table
