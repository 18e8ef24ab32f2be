"""Exact neighborhood and sampling kernels on (N, 3) float64 coordinate arrays.

Distances are accumulated axis by axis so that each pairwise value depends
only on the two points involved, never on their position in the array.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

# bound on the number of pairwise entries materialized at once
_BLOCK = 1 << 22
COINCIDENT = 1e-10


@dataclass(frozen=True)
class NeighborGroup:
    center_index: int
    neighbor_indices: np.ndarray
    distances: np.ndarray


@dataclass(frozen=True)
class SampleResult:
    selected_indices: np.ndarray
    farthest_distances: np.ndarray


def euclidean_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return math.sqrt(float(np.sum((a - b) ** 2)))


def _sq_dists(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    d = (query[:, 0:1] - reference[None, :, 0]) ** 2
    d += (query[:, 1:2] - reference[None, :, 1]) ** 2
    d += (query[:, 2:3] - reference[None, :, 2]) ** 2
    return d


def _knn_rows(d: np.ndarray, k: int) -> np.ndarray:
    R = d.shape[1]
    if k == R:
        return np.argsort(d, axis=1, kind="stable")
    part = np.argpartition(d, k - 1, axis=1)[:, :k]
    part.sort(axis=1)
    vals = np.take_along_axis(d, part, axis=1)
    kth = vals.max(axis=1, keepdims=True)
    # rows with a tie straddling the k-th slot need the full stable order
    crowded = np.flatnonzero((d <= kth).sum(axis=1) > k)
    order = np.argsort(vals, axis=1, kind="stable")
    idx = np.take_along_axis(part, order, axis=1)
    for r in crowded:
        idx[r] = np.argsort(d[r], kind="stable")[:k]
    return idx


def _content_order(points: np.ndarray) -> np.ndarray:
    """Indices sorting points by (x, y, z); exact duplicates keep index order."""
    return np.lexsort((points[:, 2], points[:, 1], points[:, 0]))


def _prepare(query, reference, k):
    query = np.asarray(query, dtype=np.float64).reshape(-1, 3)
    reference = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
    R = reference.shape[0]
    if k < 1 or k > R:
        raise ValueError(f"k={k} must lie in [1, {R}] (reference size)")
    if not (np.isfinite(query).all() and np.isfinite(reference).all()):
        raise ValueError("coordinates must be finite")
    return query, reference


def knn_brute(query, reference, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Reference k-NN by exhaustive distance computation.

    Rows are sorted by distance. Equal distances resolve by the neighbor's
    coordinates (lexicographic), then by the smaller reference index, so the
    result does not depend on how the reference points are ordered.
    """
    query, reference = _prepare(query, reference, k)
    order = _content_order(reference)
    idx, dist = _brute_by_index(query, reference[order], k)
    return order[idx], dist


def _brute_by_index(query: np.ndarray, reference: np.ndarray, k: int):
    R = reference.shape[0]
    M = query.shape[0]
    idx = np.empty((M, k), dtype=np.int64)
    dist = np.empty((M, k), dtype=np.float64)
    step = max(1, _BLOCK // max(R, 1))
    for s in range(0, M, step):
        d = _sq_dists(query[s:s + step], reference)
        rows = _knn_rows(d, k)
        idx[s:s + step] = rows
        dist[s:s + step] = np.sqrt(np.take_along_axis(d, rows, axis=1))
    return idx, dist


# extra kd-tree candidates fetched beyond k to certify the exact neighbor set
_SLACK = 4


def knn_indices(query, reference, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Same result as :func:`knn_brute`, found through a kd-tree.

    The tree proposes ``k + 4`` candidates; distances are recomputed with the
    brute-force formula and re-sorted. A row whose k-th distance is not
    strictly below every non-selected candidate falls back to brute force.
    """
    query, reference = _prepare(query, reference, k)
    order = _content_order(reference)
    idx, dist = _tree_by_index(query, reference[order], k)
    return order[idx], dist


def _tree_by_index(query: np.ndarray, reference: np.ndarray, k: int):
    R = reference.shape[0]
    c = k + _SLACK
    if c >= R or query.shape[0] * R <= 4096:
        return _brute_by_index(query, reference, k)
    _, cand = cKDTree(reference).query(query, k=c)
    diff = query[:, None, :] - reference[cand]
    d = diff[..., 0] ** 2
    d += diff[..., 1] ** 2
    d += diff[..., 2] ** 2
    order = np.lexsort((cand, d), axis=-1)
    cand = np.take_along_axis(cand, order, axis=1)
    d = np.take_along_axis(d, order, axis=1)
    # the tree's own rounding may disagree with ours near ties
    unsure = np.flatnonzero(d[:, k - 1] * (1 + 1e-9) + 1e-300 >= d[:, c - 1])
    idx, dist = cand[:, :k].copy(), np.sqrt(d[:, :k])
    if unsure.size:
        bi, bd = _brute_by_index(query[unsure], reference, k)
        idx[unsure], dist[unsure] = bi, bd
    return idx, dist


def knn(query, reference, k: int) -> list[NeighborGroup]:
    idx, dist = knn_indices(query, reference, k)
    return [NeighborGroup(i, idx[i], dist[i]) for i in range(idx.shape[0])]


def centroid(points: np.ndarray) -> np.ndarray:
    # exactly rounded, hence independent of point order
    return np.array([math.fsum(points[:, a]) / len(points) for a in range(3)])


def _farthest(d: np.ndarray, pts: np.ndarray) -> int:
    i = int(np.argmax(d))
    if np.count_nonzero(d == d[i]) == 1:
        return i
    cand = np.flatnonzero(d == d[i])
    c = pts[cand]
    return int(cand[np.lexsort((cand, c[:, 2], c[:, 1], c[:, 0]))[0]])


def farthest_point_sample(points, m: int) -> SampleResult:
    """Greedy max-min subset of size ``m``.

    Every tie (the seed is the point farthest from the centroid, each later
    pick the point farthest from the selection) goes to the smallest
    (x, y, z), then the smallest index.
    ``farthest_distances[0]`` is the seed's distance to the centroid, the
    rest are the max-min distances at selection time.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    N = pts.shape[0]
    if m < 1 or m > N:
        raise ValueError(f"m={m} must lie in [1, {N}]")
    d0 = _sq_dists(centroid(pts)[None], pts)[0]
    seed = _farthest(d0, pts)

    selected = np.empty(m, dtype=np.int64)
    far = np.empty(m, dtype=np.float64)
    selected[0] = seed
    far[0] = math.sqrt(d0[seed])
    mind = _sq_dists(pts[seed:seed + 1], pts)[0]
    for i in range(1, m):
        nxt = _farthest(mind, pts)
        selected[i] = nxt
        far[i] = math.sqrt(mind[nxt])
        np.minimum(mind, _sq_dists(pts[nxt:nxt + 1], pts)[0], out=mind)
    return SampleResult(selected, far)


def interpolation_weights(coarse_pos, fine_pos, k: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Neighbor indices and normalized inverse-squared-distance weights.

    Uses ``min(k, M)`` coarse neighbors. A fine point within 1e-10 of a
    coarse point takes weight 1 on it and 0 elsewhere.
    """
    coarse_pos = np.asarray(coarse_pos, dtype=np.float64).reshape(-1, 3)
    k = min(k, coarse_pos.shape[0])
    idx, dist = knn_indices(fine_pos, coarse_pos, k)
    hit = dist[:, 0] < COINCIDENT
    safe = np.where(dist < COINCIDENT, 1.0, dist)
    w = 1.0 / (safe * safe)
    w /= w.sum(axis=1, keepdims=True)
    w[hit] = 0.0
    w[hit, 0] = 1.0
    return idx, w


def interpolate_features(coarse_pos, coarse_feat, fine_pos) -> np.ndarray:
    coarse_feat = np.asarray(coarse_feat)
    if coarse_feat.shape[0] < 1:
        raise ValueError("need at least one coarse point")
    idx, w = interpolation_weights(coarse_pos, fine_pos)
    return np.einsum("nk,nkc->nc", w, coarse_feat[idx])
