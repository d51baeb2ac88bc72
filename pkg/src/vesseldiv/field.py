"""Neighbourhood systems over detected points and the facet-flux divergence.

Pair arrays are ``(m, 2)`` integer arrays with ``i < j`` in every row and
rows sorted lexicographically, so graphs built from the same points are
identical regardless of how the spatial index enumerates them.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from .vesselness import PointSet, TangentPoint

__all__ = [
    "NeighborGraph",
    "build_neighborhood",
    "pair_divergence",
    "pair_divergences",
    "negative_part",
    "positive_part",
    "canonical_pairs",
    "write_edge_list",
    "NEIGHBORHOOD_MODES",
    "DIVERGENCE_MODES",
]

NEIGHBORHOOD_MODES = ("grid26", "grid6", "knn")
DIVERGENCE_MODES = ("same", "delaunay")


def canonical_pairs(pairs) -> np.ndarray:
    """Sort each pair to ``i < j``, drop self-pairs and duplicates, sort rows."""
    p = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    p = np.sort(p, axis=1)
    p = p[p[:, 0] != p[:, 1]]
    if len(p) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(p, axis=0)


@dataclass
class NeighborGraph:
    """Curvature pairs ``N`` and divergence pairs ``D`` over one point set."""

    points: PointSet
    curvature_pairs: np.ndarray
    divergence_pairs: np.ndarray
    facet_area: float = 1.0

    def __post_init__(self):
        self.curvature_pairs = canonical_pairs(self.curvature_pairs)
        self.divergence_pairs = canonical_pairs(self.divergence_pairs)
        n = len(self.points)
        for name in ("curvature_pairs", "divergence_pairs"):
            p = getattr(self, name)
            if len(p) and (p.min() < 0 or p.max() >= n):
                raise ValueError(f"{name} refers to points outside 0..{n - 1}")
        if not self.facet_area > 0:
            raise ValueError("facet_area must be positive")

    def __len__(self) -> int:
        return len(self.points)

    def union_pairs(self):
        """All pairs in ``N`` or ``D`` with membership flags ``(pairs, in_n, in_d)``."""
        both = canonical_pairs(np.vstack([self.curvature_pairs, self.divergence_pairs]))
        return both, _member(both, self.curvature_pairs), _member(both, self.divergence_pairs)

    def with_points(self, points: PointSet) -> "NeighborGraph":
        """Same pair structure over an updated point state."""
        if len(points) != len(self.points):
            raise ValueError("point count changed")
        return NeighborGraph(points, self.curvature_pairs, self.divergence_pairs, self.facet_area)


def _member(pairs, subset):
    if len(subset) == 0 or len(pairs) == 0:
        return np.zeros(len(pairs), dtype=bool)
    n = int(max(pairs.max(), subset.max())) + 1
    key = pairs[:, 0] * n + pairs[:, 1]
    sub = subset[:, 0] * n + subset[:, 1]
    return np.isin(key, sub)


def _grid_pairs(voxels, p_norm):
    if len(voxels) < 2:
        return np.zeros((0, 2), dtype=np.int64)
    tree = cKDTree(voxels.astype(float))
    pairs = tree.query_pairs(r=1.0 + 1e-9, p=p_norm, output_type="ndarray").reshape(-1, 2)
    # points sharing a voxel are not neighbours (offset must be non-zero)
    same = np.all(voxels[pairs[:, 0]] == voxels[pairs[:, 1]], axis=1)
    return pairs[~same]


def _knn_pairs(positions, k):
    n = len(positions)
    if k >= n:
        raise ValueError(f"knn needs k < number of points, got k={k} for {n} points")
    if k < 1:
        raise ValueError("k must be >= 1")
    _, idx = cKDTree(positions).query(positions, k=k + 1)
    rows = np.repeat(np.arange(n), k)
    return np.column_stack([rows, idx[:, 1:].ravel()])


def _delaunay_pairs(positions):
    if len(positions) < 5:
        raise ValueError("Delaunay pairs need at least 5 points")
    tri = Delaunay(positions)
    s = tri.simplices
    edges = [s[:, [a, b]] for a in range(4) for b in range(a + 1, 4)]
    return np.vstack(edges)


def build_neighborhood(points: PointSet, mode: str = "grid26", k: int | None = None,
                       divergence_mode: str = "same", facet_area: float = 1.0) -> NeighborGraph:
    """Pair systems over ``points``.

    Parameters
    ----------
    mode : {"grid26", "grid6", "knn"}
        ``grid26`` links points whose voxel coordinates differ by at most one
        along every axis, ``grid6`` only face neighbours, ``knn`` the ``k``
        nearest Euclidean neighbours (symmetrised by union).
    divergence_mode : {"same", "delaunay"}
        ``same`` reuses the curvature pairs; ``delaunay`` takes the edges of
        a 3-D Delaunay triangulation of the raw positions.
    """
    if len(points) == 0:
        raise ValueError("point set is empty")
    if mode == "grid26":
        pairs = _grid_pairs(points.voxels, np.inf)
    elif mode == "grid6":
        pairs = _grid_pairs(points.voxels, 1)
    elif mode == "knn":
        if k is None:
            raise ValueError("knn mode needs k")
        pairs = _knn_pairs(points.positions, int(k))
    else:
        raise ValueError(f"unknown neighbourhood mode {mode!r}")
    if divergence_mode == "same":
        div = pairs
    elif divergence_mode == "delaunay":
        div = _delaunay_pairs(points.positions)
    else:
        raise ValueError(f"unknown divergence mode {divergence_mode!r}")
    return NeighborGraph(points, pairs, div, facet_area)


def pair_divergence(p: TangentPoint, q: TangentPoint, facet_area: float = 1.0) -> float:
    """Flux of the oriented tangent field across the facet between ``p`` and ``q``.

    Uses the raw positions. Symmetric in ``(p, q)``; negated when both signs
    flip.
    """
    pq = q.position - p.position
    d = float(np.linalg.norm(pq))
    if d == 0:
        raise ValueError("coincident positions")
    return float((np.dot(q.oriented, pq) - np.dot(p.oriented, pq)) / d * facet_area)


def pair_divergences(positions, oriented, pairs, facet_area: float = 1.0) -> np.ndarray:
    """Vectorised :func:`pair_divergence` for index pairs ``(m, 2)``."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    i, j = pairs[:, 0], pairs[:, 1]
    pq = positions[j] - positions[i]
    d = np.linalg.norm(pq, axis=1)
    if np.any(d == 0):
        raise ValueError("coincident positions in pair list")
    return np.einsum("ij,ij->i", oriented[j] - oriented[i], pq) / d * facet_area


def negative_part(a):
    """``max(0, -a)``."""
    return np.maximum(0.0, -np.asarray(a, dtype=float)) if np.ndim(a) else max(0.0, -float(a))


def positive_part(a):
    """``max(0, a)``."""
    return np.maximum(0.0, np.asarray(a, dtype=float)) if np.ndim(a) else max(0.0, float(a))


def write_edge_list(graph: NeighborGraph, path, use_divergence_pairs: bool = True) -> None:
    """Debug dump, one pair per line: ``i j pair_divergence``."""
    pairs = graph.divergence_pairs if use_divergence_pairs else graph.curvature_pairs
    pts = graph.points
    div = pair_divergences(pts.positions, pts.oriented, pairs, graph.facet_area) if len(pairs) else []
    lines = ["# i j pair_divergence"]
    lines += [f"{i} {j} {float(d)!r}" for (i, j), d in zip(pairs, div)]
    Path(path).write_text("\n".join(lines) + "\n")
