"""Tree topology from oriented tangent points: arc-length weighted KNN graph and MST."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .volume import Forest

__all__ = [
    "WeightedGraph",
    "arc_length_weight",
    "arc_length_weights",
    "build_knn_graph",
    "minimum_spanning_tree",
    "mst_weight",
    "write_weighted_edges",
]

SERIES_CUTOFF = 1e-6


def _theta_over_sin(theta):
    theta = np.asarray(theta, dtype=float)
    small = theta < SERIES_CUTOFF
    safe = np.where(small, 1.0, theta)
    return np.where(small, 1.0 + theta * theta / 6.0, safe / np.sin(safe))


def arc_length_weights(pos_i, tan_i, pos_j, tan_j) -> np.ndarray:
    """Vectorised :func:`arc_length_weight` over rows."""
    chord = np.asarray(pos_j, dtype=float) - np.asarray(pos_i, dtype=float)
    d = np.linalg.norm(chord, axis=-1)
    if np.any(d == 0):
        raise ValueError("coincident positions")
    e = chord / d[..., None]

    def folded(t):
        # angle between the undirected line and the chord, in [0, pi/2]
        c = np.abs(np.sum(t * e, axis=-1))
        s = np.linalg.norm(np.cross(t, e), axis=-1)
        return np.arctan2(s, c)

    return 0.5 * d * (_theta_over_sin(folded(np.asarray(tan_i, float)))
                      + _theta_over_sin(folded(np.asarray(tan_j, float))))


def arc_length_weight(p_pos, p_tan, q_pos, q_tan) -> float:
    """Mean length of the two circular arcs through ``p`` and ``q`` tangent to ``l_p`` or ``l_q``.

    An arc meeting its chord of length ``d`` at angle ``theta`` has length
    ``d * theta / sin(theta)``. Angles are folded to ``[0, pi/2]`` so the
    weight ignores tangent orientation.
    """
    return float(arc_length_weights(np.asarray(p_pos)[None], np.asarray(p_tan)[None],
                                    np.asarray(q_pos)[None], np.asarray(q_tan)[None])[0])


@dataclass
class WeightedGraph:
    """Undirected simple graph; ``edges[k] = (i, j)`` with ``i < j``."""

    n: int
    edges: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(self.edges) != len(self.weights):
            raise ValueError("edges and weights differ in length")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise ValueError("weights must be finite and non-negative")

    def n_components(self) -> int:
        a = coo_matrix((np.ones(len(self.edges)), (self.edges[:, 0], self.edges[:, 1])), shape=(self.n, self.n))
        return int(connected_components(a, directed=False)[0])


def build_knn_graph(positions, tangents, k: int = 6, complete: bool = False) -> WeightedGraph:
    """Symmetric union of k-nearest neighbourhoods with arc-length weights.

    ``complete`` links every pair instead (intended for at most a few
    thousand points). ``k`` is capped at ``n - 1``.
    """
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    tangents = np.asarray(tangents, dtype=float).reshape(-1, 3)
    n = len(positions)
    if n < 2:
        return WeightedGraph(n, np.zeros((0, 2), np.int64), np.zeros(0))
    if complete:
        i, j = np.triu_indices(n, 1)
        pairs = np.column_stack([i, j])
    else:
        kk = min(int(k), n - 1)
        if kk < 1:
            raise ValueError("k must be >= 1")
        _, idx = cKDTree(positions).query(positions, k=kk + 1)
        pairs = np.column_stack([np.repeat(np.arange(n), kk), idx[:, 1:].ravel()])
        pairs = np.sort(pairs, axis=1)
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
        pairs = np.unique(pairs, axis=0)
    w = arc_length_weights(positions[pairs[:, 0]], tangents[pairs[:, 0]],
                           positions[pairs[:, 1]], tangents[pairs[:, 1]])
    return WeightedGraph(n, pairs, w)


def _find(parent, x):
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        parent[x], x = root, parent[x]
    return root


def minimum_spanning_tree(graph: WeightedGraph, positions=None, radii=None, voxels=None,
                          root_hint: int | None = None) -> Forest:
    """Kruskal MST per connected component, returned as a rooted forest.

    Ties are broken by ``(weight, i, j)``. Each component is rooted at its
    node with the smallest x-fastest voxel linear index (``voxels``; node
    index when omitted) unless ``root_hint`` falls inside it.
    """
    n = graph.n
    if n == 0:
        raise ValueError("graph is empty")
    e = graph.edges
    order = np.lexsort((e[:, 1], e[:, 0], graph.weights)) if len(e) else np.zeros(0, np.int64)
    uf = list(range(n))
    adj = [[] for _ in range(n)]
    for k in order:
        a, b = int(e[k, 0]), int(e[k, 1])
        ra, rb = _find(uf, a), _find(uf, b)
        if ra != rb:
            uf[ra] = rb
            adj[a].append(b)
            adj[b].append(a)
    if voxels is not None:
        v = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
        rank = np.lexsort((v[:, 0], v[:, 1], v[:, 2]))
    else:
        rank = np.arange(n)
    parents = np.full(n, -2, dtype=np.int64)
    starts = list(rank)
    if root_hint is not None:
        starts.insert(0, int(root_hint))
    for s in starts:
        if parents[s] != -2:
            continue
        parents[s] = -1
        stack = [s]
        while stack:
            x = stack.pop()
            for y in sorted(adj[x]):
                if parents[y] == -2:
                    parents[y] = x
                    stack.append(y)
    pos = np.zeros((n, 3)) if positions is None else np.asarray(positions, dtype=float).reshape(-1, 3)
    rad = np.ones(n) if radii is None else np.asarray(radii, dtype=float).reshape(-1)
    return Forest(pos, rad, parents)


def mst_weight(graph: WeightedGraph, forest: Forest) -> float:
    """Total weight of the forest's edges looked up in ``graph``."""
    lookup = {(int(a), int(b)): float(w) for (a, b), w in zip(graph.edges, graph.weights)}
    return math.fsum(lookup[(min(a, b), max(a, b))] for a, b in forest.edges())


def write_weighted_edges(graph: WeightedGraph, path) -> None:
    lines = ["# i j weight"] + [f"{a} {b} {float(w)!r}" for (a, b), w in zip(graph.edges, graph.weights)]
    Path(path).write_text("\n".join(lines) + "\n")
