"""Exact nearest-neighbor search in the learned metric.

Reference rows are stored projected by ``M^{1/2}``, so the Mahalanobis
distance becomes a plain Euclidean one. Ties in distance (equal to a
relative 1e-10) are always broken by the smaller reference index.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from dance._parallel import chunked_rows
from dance.errors import DimensionError, ValidationError
from dance.kernels import as_feature_matrix, psd_sqrt

TIE_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class ProjectedIndex:
    projected_reference: np.ndarray
    labels: np.ndarray
    sqrt_feature_matrix: np.ndarray
    class_count: int
    ids: np.ndarray = None

    def __len__(self):
        return self.projected_reference.shape[0]

    @property
    def dim(self):
        return self.sqrt_feature_matrix.shape[0]

    def project(self, z):
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.dim:
            raise DimensionError(f"query dimension {z.shape[-1]} does not match index dimension {self.dim}")
        return z @ self.sqrt_feature_matrix

    def query(self, queries, k, exclude=None):
        """Batched k-NN search.

        ``exclude`` is ``None`` or one reference index per query row to leave
        out (``-1`` for none). Returns ``(indices, distances)``, each
        ``(m, k)``, ascending by distance then index.
        """
        q = np.asarray(queries, dtype=np.float64)
        if q.ndim == 1:
            q = q[None, :]
        projected = self.project(q)
        return nearest_from_projected(projected, self.projected_reference, k, exclude)


@dataclass(frozen=True)
class NeighborList:
    indices: np.ndarray
    distances: np.ndarray


def build_index(reference, m):
    m = as_feature_matrix(m, reference.dim)
    root = psd_sqrt(m)
    projected = reference.embeddings @ root
    projected.setflags(write=False)
    return ProjectedIndex(projected, reference.labels, root, reference.class_count, reference.ids)


def _check_k(k, n_ref, excluding):
    available = n_ref - (1 if excluding else 0)
    if not 1 <= k <= available:
        raise ValidationError(f"k={k} neighbors requested but only {available} reference rows are available")


def _tie_groups(sorted_dist):
    """Group ids along each row of ascending distances: entries within
    ``TIE_RTOL`` of their predecessor share a group (rounding-level ties)."""
    gap = np.diff(sorted_dist, axis=1) > TIE_RTOL * np.maximum(1.0, sorted_dist[:, 1:])
    return np.concatenate([np.zeros((sorted_dist.shape[0], 1), dtype=np.int64),
                           np.cumsum(gap, axis=1)], axis=1)


def _order_with_ties(dist, cand):
    """Sort candidate columns ``cand`` of each row by distance, then index
    within groups of tied distances."""
    cd = np.take_along_axis(dist, cand, axis=1)
    first = np.lexsort((cand, cd), axis=1)
    cand = np.take_along_axis(cand, first, axis=1)
    groups = _tie_groups(np.take_along_axis(cd, first, axis=1))
    return np.take_along_axis(cand, np.lexsort((cand, groups), axis=1), axis=1)


def _select_rows(dist, k):
    """Exact top-k per row of a distance block with index tie-breaking.

    Distances that agree to ``TIE_RTOL`` count as tied, so points at the
    same metric distance are ordered by index even when rounding in the
    projection separates them by an ulp or two.
    """
    n = dist.shape[1]
    if k >= n:
        idx = _order_with_ties(dist, np.argsort(dist, axis=1, kind="stable"))[:, :k]
        return idx, np.take_along_axis(dist, idx, axis=1)
    part = np.argpartition(dist, k - 1, axis=1)[:, :k]
    kth = np.take_along_axis(dist, part, axis=1).max(axis=1)
    edge = kth + TIE_RTOL * np.maximum(1.0, kth)
    crowded = (dist <= edge[:, None]).sum(axis=1) > k
    idx = _order_with_ties(dist, part)
    for row in np.flatnonzero(crowded):
        cand = np.flatnonzero(dist[row] <= edge[row])
        idx[row] = _order_with_ties(dist[row:row + 1], cand[None, :])[0, :k]
    return idx, np.take_along_axis(dist, idx, axis=1)


def nearest_from_projected(projected_queries, projected_reference, k, exclude=None):
    q = np.asarray(projected_queries, dtype=np.float64)
    ref = np.asarray(projected_reference, dtype=np.float64)
    if q.shape[1] != ref.shape[1]:
        raise DimensionError("query and reference dimensions differ")
    if exclude is not None:
        exclude = np.asarray(exclude, dtype=np.int64).reshape(-1)
        if exclude.shape[0] != q.shape[0]:
            raise ValidationError("exclude needs one entry per query")
        if np.any(exclude >= ref.shape[0]):
            raise ValidationError("exclude index out of range")
    _check_k(k, ref.shape[0], exclude is not None and np.any(exclude >= 0))

    def block(s, e):
        dist = cdist(q[s:e], ref, metric="euclidean")
        if exclude is not None:
            rows = np.flatnonzero(exclude[s:e] >= 0)
            dist[rows, exclude[s:e][rows]] = np.inf
        idx, dd = _select_rows(dist, k)
        return np.concatenate([idx.astype(np.float64), dd], axis=1)

    packed = chunked_rows(block, q.shape[0])
    return packed[:, :k].astype(np.int64), packed[:, k:]


def knn_query(index, query, k, exclude=None):
    query = np.asarray(query, dtype=np.float64)
    if query.ndim != 1:
        raise DimensionError("knn_query takes a single embedding vector")
    ex = None if exclude is None else np.array([exclude])
    idx, dist = index.query(query[None, :], k, ex)
    return NeighborList(idx[0], dist[0])
