"""
Exact nearest-neighbour queries over fixed point sets.

The kd-tree only proposes candidates; distances are recomputed with
``squared_distances`` so results match a linear scan bit for bit, with ties going
to the lowest point index.
"""

import logging
from typing import Tuple

import numpy as np
from scipy.spatial import cKDTree

from ..core import autodiff as ad
from ..core.config import worker_count
from ..core.errors import DomainError

logger = logging.getLogger(__name__)

# Relative slack when deciding that a tree distance could tie the best candidate
_TIE_SLACK = 1e-9


def squared_distances(a, b) -> np.ndarray:
    """||a - b||^2 along the last axis (broadcasting)"""
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return (diff * diff).sum(axis=-1)


class SpatialIndex:
    """Balanced kd-tree over a fixed (N, 3) point set"""

    def __init__(self, points):
        points = np.asarray(ad.value_of(points), dtype=np.float64)
        if points.ndim != 2 or points.shape[0] == 0:
            raise DomainError(f"Cannot index an empty point set (shape {points.shape})")
        self.points = points
        self.tree = cKDTree(points, balanced_tree=True)

    def __len__(self) -> int:
        return len(self.points)

    def nearest(self, x) -> Tuple[np.ndarray, np.ndarray]:
        """Index and squared distance of the nearest stored point for each query row"""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        n = len(self.points)
        k = min(4, n)

        dist, idx = self.tree.query(x, k=k, workers=worker_count())
        if k == 1:
            dist, idx = dist[:, None], idx[:, None]

        d2 = squared_distances(x[:, None, :], self.points[idx])
        order = np.lexsort((idx, d2), axis=-1)
        rows = np.arange(len(x))
        best = idx[rows, order[:, 0]]
        best_d2 = d2[rows, order[:, 0]]

        # Rows whose k-th tree candidate may still tie the best one
        if k < n:
            radius = np.sqrt(best_d2) * (1.0 + _TIE_SLACK) + 1e-12
            unsure = np.nonzero(dist[:, -1] <= radius)[0]
            for row in unsure:
                cand = np.asarray(self.tree.query_ball_point(x[row], radius[row]), dtype=np.int64)
                cand_d2 = squared_distances(x[row], self.points[cand])
                pick = np.lexsort((cand, cand_d2))[0]
                best[row], best_d2[row] = cand[pick], cand_d2[pick]

        if single:
            return best[0], best_d2[0]
        return best, best_d2

    def knn(self, x, n: int) -> Tuple[np.ndarray, np.ndarray]:
        """Indices and squared distances of the n nearest points, closest first"""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = min(int(n), len(self.points))
        _, idx = self.tree.query(x, k=n, workers=worker_count())
        idx = np.asarray(idx).reshape(len(x), n)
        d2 = squared_distances(x[:, None, :], self.points[idx])
        order = np.lexsort((idx, d2), axis=-1)
        idx, d2 = np.take_along_axis(idx, order, -1), np.take_along_axis(d2, order, -1)

        # Points tying the n-th distance resolve to the lowest indices
        if n < len(self.points):
            radius = np.sqrt(d2[:, -1]) * (1.0 + _TIE_SLACK) + 1e-12
            counts = self.tree.query_ball_point(x, radius, return_length=True, workers=worker_count())
            for row in np.nonzero(np.asarray(counts) > n)[0]:
                cand = np.asarray(self.tree.query_ball_point(x[row], radius[row]), dtype=np.int64)
                cand_d2 = squared_distances(x[row], self.points[cand])
                pick = np.lexsort((cand, cand_d2))[:n]
                idx[row], d2[row] = cand[pick], cand_d2[pick]
        return idx, d2


def nearest(index: SpatialIndex, x) -> Tuple[np.ndarray, float]:
    """Nearest stored point and its squared distance"""
    i, d2 = index.nearest(x)
    return index.points[i], d2


def match(x, Q) -> np.ndarray:
    """Point of Q closest to x under squared distance; lowest index on ties"""
    Q = np.asarray(ad.value_of(Q), dtype=np.float64)
    if Q.size == 0:
        raise DomainError("Cannot match against an empty point set")
    i, _ = SpatialIndex(Q).nearest(np.asarray(ad.value_of(x), dtype=np.float64))
    return Q[i]


def _directed_sq(P, Q):
    """Mean over P of the squared distance to the nearest point of Q (tape-aware)"""
    idx, _ = SpatialIndex(Q).nearest(ad.value_of(P))
    diff = ad.sub(P, ad.getitem(Q, idx))
    return ad.mean(ad.sum_(ad.mul(diff, diff), axis=-1))


def chamfer(P, Q):
    """Symmetric mean squared nearest-neighbour distance between two point sets"""
    if np.size(ad.value_of(P)) == 0 or np.size(ad.value_of(Q)) == 0:
        raise DomainError("Chamfer distance needs two nonempty point sets")
    return ad.add(_directed_sq(P, Q), _directed_sq(Q, P))
