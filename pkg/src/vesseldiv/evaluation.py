"""Scoring reconstructions against ground-truth trees.

Both trees are resampled densely along their edges; a point matches when its
nearest counterpart lies closer than ``max(r, c)`` voxels, with ``r`` the
ground-truth radius at the relevant ground-truth point. Fall-out counts
unmatched points of the reconstruction.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .field import pair_divergence
from .vesselness import TangentPoint
from .volume import Forest

__all__ = [
    "MatchParams",
    "RocPoint",
    "Resampled",
    "MatchResult",
    "BifurcationScores",
    "resample_tree",
    "match_and_score",
    "roc_curve",
    "bifurcation_roc",
    "recall_at_fallout",
    "bifurcation_scores",
    "branch_directions",
    "flow_consistency",
    "write_roc_csv",
    "write_angle_csv",
]


@dataclass
class MatchParams:
    """Matching constants; thresholds and region sizes are in voxels.

    ``bifurcation_region`` bounds the neighbourhood of each ground-truth
    bifurcation used for bifurcation fall-out; ``direction_length`` is the
    arc length along which incident branch directions are measured and the
    search radius for a reconstructed junction.
    """

    resample_step: float = 0.0023
    match_threshold_c: float = 0.7
    bifurcation_threshold_c: float = math.sqrt(3.0)
    voxel_size: float = 0.046
    bifurcation_region: float = 4.0
    direction_length: float = 3.0

    def validate(self) -> None:
        for k, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"{k} must be positive, got {v}")


@dataclass
class RocPoint:
    threshold: float
    recall: float
    fallout: float

    def __post_init__(self):
        if not (0.0 <= self.recall <= 1.0 and 0.0 <= self.fallout <= 1.0):
            raise ValueError("recall and fallout must lie in [0, 1]")


@dataclass
class Resampled:
    """Dense samples of a forest; ``node[k]`` is the tree node at sample k or ``-1``."""

    positions: np.ndarray
    radii: np.ndarray
    is_bifurcation: np.ndarray
    node: np.ndarray
    directions: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.positions)


def resample_tree(tree: Forest, step: float) -> Resampled:
    """Uniform arc-length samples along every edge, node positions included once.

    Each edge of length ``L`` is split into ``ceil(L / step)`` equal pieces,
    so sample spacing never exceeds ``step``. Radii are interpolated linearly
    between the end nodes. Branching nodes (degree >= 3) are tagged and carry
    the unit directions of their incident edges in ``directions``.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    deg = tree.degrees()
    pos = [tree.positions]
    rad = [tree.radii]
    node = [np.arange(len(tree))]
    bif = [deg >= 3]
    for a, b in tree.edges():
        pa, pb = tree.positions[a], tree.positions[b]
        length = float(np.linalg.norm(pb - pa))
        n_seg = max(1, math.ceil(length / step - 1e-9))
        if n_seg > 1:
            f = np.arange(1, n_seg)[:, None] / n_seg
            pos.append(pa + f * (pb - pa))
            rad.append(tree.radii[a] + f[:, 0] * (tree.radii[b] - tree.radii[a]))
            node.append(np.full(n_seg - 1, -1))
            bif.append(np.zeros(n_seg - 1, dtype=bool))
    dirs = {}
    adj = tree.adjacency()
    for b in np.flatnonzero(deg >= 3):
        d = tree.positions[adj[b]] - tree.positions[b]
        dirs[int(b)] = d / np.linalg.norm(d, axis=1, keepdims=True)
    return Resampled(np.vstack(pos), np.concatenate(rad), np.concatenate(bif),
                     np.concatenate(node).astype(np.int64), dirs)


@dataclass
class MatchResult:
    recall: float
    fallout: float
    n_gt: int
    n_gt_matched: int
    n_rt: int
    n_rt_matched: int
    empty_reconstruction: bool = False


def _match_masks(gt_pos, gt_rad, rt_pos, c, voxel):
    """Boolean match masks for GT and RT points under the ``max(r, c)`` rule."""
    gt_lim = np.maximum(gt_rad / voxel, c) * voxel
    d_gt, _ = cKDTree(rt_pos).query(gt_pos)
    d_rt, idx = cKDTree(gt_pos).query(rt_pos)
    return d_gt < gt_lim, d_rt < gt_lim[idx]


def match_and_score(gt: Resampled, rt: Resampled | None, params: MatchParams,
                    c: float | None = None) -> MatchResult:
    """Recall over ground-truth points and fall-out over reconstructed points."""
    c = params.match_threshold_c if c is None else c
    n_gt = len(gt)
    if rt is None or len(rt) == 0:
        return MatchResult(0.0, 0.0, n_gt, 0, 0, 0, True)
    gm, rm = _match_masks(gt.positions, gt.radii, rt.positions, c, params.voxel_size)
    return MatchResult(float(gm.mean()), float(1.0 - rm.mean()), n_gt, int(gm.sum()), len(rt), int(rm.sum()))


def _check_thresholds(thresholds):
    t = np.asarray(thresholds, dtype=float)
    if len(t) > 1 and np.any(np.diff(t) <= 0):
        raise ValueError("thresholds must be strictly increasing")
    return t


def roc_curve(score_field, gt_tree: Forest, thresholds: Sequence[float], params: MatchParams,
              reconstruct: Callable) -> list[RocPoint]:
    """Recall and fall-out for each threshold.

    ``reconstruct(score_field, threshold)`` runs everything downstream of the
    threshold and returns a :class:`Forest` or ``None`` when nothing survives.
    """
    gt = resample_tree(gt_tree, params.resample_step)
    out = []
    for t in _check_thresholds(thresholds):
        rec = reconstruct(score_field, float(t))
        rt = None if rec is None else resample_tree(rec, params.resample_step)
        m = match_and_score(gt, rt, params)
        out.append(RocPoint(float(t), m.recall, m.fallout))
    return out


def bifurcation_roc(score_field, gt_tree: Forest, thresholds: Sequence[float], params: MatchParams,
                    reconstruct: Callable) -> list[RocPoint]:
    """Bifurcation recall and fall-out (:func:`bifurcation_scores`) per threshold."""
    out = []
    for t in _check_thresholds(thresholds):
        rec = reconstruct(score_field, float(t))
        b = bifurcation_scores(gt_tree, rec, params)
        out.append(RocPoint(float(t), b.recall, b.fallout))
    return out


def recall_at_fallout(roc: Sequence[RocPoint], level: float) -> float:
    """Best recall among operating points whose fall-out does not exceed ``level`` (0 if none)."""
    ok = [p.recall for p in roc if p.fallout <= level]
    return max(ok) if ok else 0.0


def branch_directions(tree: Forest, node: int, length: float, adj=None) -> np.ndarray:
    """Unit directions from ``node`` to the point at arc length ``length`` along each incident branch.

    Walks through degree-2 nodes and stops early at leaves or branching nodes.
    """
    adj = tree.adjacency() if adj is None else adj
    origin = tree.positions[node]
    dirs = []
    for nb in adj[node]:
        prev, cur = node, nb
        acc = float(np.linalg.norm(tree.positions[cur] - tree.positions[prev]))
        while acc < length and len(adj[cur]) == 2:
            nxt = adj[cur][0] if adj[cur][0] != prev else adj[cur][1]
            seg = float(np.linalg.norm(tree.positions[nxt] - tree.positions[cur]))
            prev, cur = cur, nxt
            acc += seg
        end = tree.positions[cur]
        if acc > length:
            # back off along the last segment to land exactly at ``length``
            seg_vec = tree.positions[cur] - tree.positions[prev]
            seg_len = float(np.linalg.norm(seg_vec))
            end = tree.positions[prev] + seg_vec * ((seg_len - (acc - length)) / seg_len)
        d = end - origin
        norm = np.linalg.norm(d)
        if norm > 0:
            dirs.append(d / norm)
    return np.array(dirs).reshape(-1, 3)


def _angle_deg(a, b):
    c = np.clip(np.dot(a, b), -1.0, 1.0)
    s = np.linalg.norm(np.cross(a, b))
    return math.degrees(math.atan2(s, c))


def assignment_angle_error(gt_dirs: np.ndarray, rt_dirs: np.ndarray) -> float:
    """Mean angle (degrees) over GT directions under the best assignment to RT directions.

    Assignments are injective when at least as many RT directions exist;
    otherwise RT directions may be reused.
    """
    k = len(rt_dirs)
    if k == 0:
        return float("nan")
    cost = np.array([[_angle_deg(g, r) for r in rt_dirs] for g in gt_dirs])
    m = len(gt_dirs)
    maps = itertools.permutations(range(k), m) if k >= m else itertools.product(range(k), repeat=m)
    return min(float(np.mean([cost[i, j] for i, j in enumerate(mp)])) for mp in maps)


@dataclass
class BifurcationScores:
    recall: float
    fallout: float
    angle_errors: list  # (gt node id, degrees) for matched bifurcations
    matched: np.ndarray
    n_unmatched: int


def bifurcation_scores(gt_tree: Forest, reconstruction: Forest | None, params: MatchParams) -> BifurcationScores:
    """Matching restricted to ground-truth bifurcations, plus angle errors.

    A GT bifurcation is matched when the nearest reconstructed sample lies
    within ``max(r, c_b)`` voxels. Fall-out is the unmatched share of
    reconstructed samples inside ``bifurcation_region`` voxels of any GT
    bifurcation. The reconstructed junction for a matched bifurcation is the
    highest-degree reconstructed node within ``direction_length`` voxels
    (nearest node when none is that close).
    """
    vox = params.voxel_size
    c = params.bifurcation_threshold_c
    bifs = gt_tree.bifurcations()
    if reconstruction is None or len(reconstruction) == 0:
        return BifurcationScores(0.0, 0.0, [], np.zeros(len(bifs), bool), len(bifs))
    gt = resample_tree(gt_tree, params.resample_step)
    rt = resample_tree(reconstruction, params.resample_step)
    rt_tree = cKDTree(rt.positions)
    bif_pos = gt_tree.positions[bifs]
    lim = np.maximum(gt_tree.radii[bifs] / vox, c) * vox
    d, _ = rt_tree.query(bif_pos) if len(bifs) else (np.zeros(0), None)
    matched = d < lim
    recall = float(matched.mean()) if len(bifs) else 1.0
    # fall-out within the bifurcation neighbourhoods
    if len(bifs):
        near = cKDTree(bif_pos).query(rt.positions)[0] <= params.bifurcation_region * vox
    else:
        near = np.zeros(len(rt), bool)
    if near.any():
        _, rm = _match_masks(gt.positions, gt.radii, rt.positions[near], c, vox)
        fallout = float(1.0 - rm.mean())
    else:
        fallout = 0.0
    errors = []
    rho = params.direction_length * vox
    gt_adj = gt_tree.adjacency()
    rt_adj = reconstruction.adjacency()
    rt_deg = reconstruction.degrees()
    node_tree = cKDTree(reconstruction.positions)
    for b, ok in zip(bifs, matched):
        if not ok:
            continue
        gdirs = branch_directions(gt_tree, int(b), rho, gt_adj)
        cands = node_tree.query_ball_point(gt_tree.positions[b], rho)
        if cands:
            dist = np.linalg.norm(reconstruction.positions[cands] - gt_tree.positions[b], axis=1)
            order = np.lexsort((dist, -rt_deg[cands]))
            j = int(cands[order[0]])
        else:
            j = int(node_tree.query(gt_tree.positions[b])[1])
        rdirs = branch_directions(reconstruction, j, rho, rt_adj)
        errors.append((int(b), assignment_angle_error(gdirs, rdirs)))
    return BifurcationScores(recall, fallout, errors, matched, int((~matched).sum()))


@dataclass
class FlowRecord:
    bifurcation: int
    branch_signs: np.ndarray  # +1 outward, -1 inward, 0 undetermined
    divergences: np.ndarray
    pattern: str  # divergent | convergent | undetermined

    @property
    def consistent(self) -> bool | None:
        if self.pattern == "undetermined":
            return None
        return bool(np.all(self.divergences >= -1e-9))


def _segment_distance(p, a, b):
    ab = b - a
    s = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - a - s[:, None] * ab, axis=1), s


def flow_consistency(gt_tree: Forest, positions, oriented, params: MatchParams,
                     max_offset: float = 2.0, window=(1.0, 5.0)) -> list[FlowRecord]:
    """Flow pattern of the oriented field at each ground-truth bifurcation.

    For each incident branch, points within ``max_offset`` voxels of that
    branch (and nearer to it than to any other edge) whose distance from the
    bifurcation falls in ``window`` voxels vote with ``<l_p, d>``, ``d`` the
    outward branch direction. The three branch flows are then placed on unit
    tangents at equal distance along their branches and the three pair
    divergences evaluated; the bifurcation is consistent under
    ``penalize_negative`` when none is negative.
    """
    vox = params.voxel_size
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    oriented = np.asarray(oriented, dtype=float).reshape(-1, 3)
    edges = gt_tree.edges()
    dist_all = np.full((len(positions), len(edges)), np.inf)
    for k, (a, b) in enumerate(edges):
        dist_all[:, k] = _segment_distance(positions, gt_tree.positions[a], gt_tree.positions[b])[0]
    nearest_edge = np.argmin(dist_all, axis=1) if len(edges) else np.zeros(len(positions), int)
    edge_id = {(int(a), int(b)): k for k, (a, b) in enumerate(edges)}
    out = []
    adj = gt_tree.adjacency()
    for bif in gt_tree.bifurcations():
        origin = gt_tree.positions[bif]
        signs = np.zeros(3, dtype=np.int64)
        dirs = []
        for slot, nb in enumerate(adj[bif][:3]):
            d = gt_tree.positions[nb] - origin
            d /= np.linalg.norm(d)
            dirs.append(d)
            k = edge_id.get((int(bif), int(nb)), edge_id.get((int(nb), int(bif))))
            sel = (nearest_edge == k) & (dist_all[:, k] <= max_offset * vox)
            axial = (positions - origin) @ d
            sel &= (axial >= window[0] * vox) & (axial <= window[1] * vox)
            vote = float(np.sum(oriented[sel] @ d))
            signs[slot] = 0 if vote == 0 else (1 if vote > 0 else -1)
        if np.any(signs == 0):
            out.append(FlowRecord(int(bif), signs, np.full(3, np.nan), "undetermined"))
            continue
        pts = [TangentPoint(origin + d, s * d) for d, s in zip(dirs, signs)]
        div = np.array([pair_divergence(pts[i], pts[j]) for i, j in ((0, 1), (0, 2), (1, 2))])
        pattern = "convergent" if np.count_nonzero(signs < 0) >= 2 else "divergent"
        out.append(FlowRecord(int(bif), signs, div, pattern))
    return out


def write_roc_csv(rows, path) -> None:
    """Rows of ``(threshold, recall, fallout)`` or :class:`RocPoint`."""
    lines = ["threshold,recall,fallout"]
    for r in rows:
        t, rec, fo = (r.threshold, r.recall, r.fallout) if isinstance(r, RocPoint) else r
        lines.append(f"{float(t)!r},{float(rec)!r},{float(fo)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_angle_csv(errors, path) -> None:
    lines = ["bif_id,error_deg"] + [f"{int(b)},{float(e)!r}" for b, e in errors]
    Path(path).write_text("\n".join(lines) + "\n")
