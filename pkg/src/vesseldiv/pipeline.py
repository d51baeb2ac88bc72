"""Stage glue shared by the command line and the acceptance suite."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .energy import EnergyParams
from .field import build_neighborhood
from .optimize import SolveReport, TangentSolverOptions, block_coordinate_descent
from .tree import build_knn_graph, minimum_spanning_tree
from .vesselness import PointSet, VesselnessField, threshold_and_nms
from .volume import Forest

__all__ = ["METHODS", "method_params", "regularize", "extract_tree", "reconstruct_from_field"]

METHODS = ("nms", "quacurv", "oriquacurv", "oriabscurv")


def method_params(method: str, base: EnergyParams | None = None) -> EnergyParams | None:
    """Energy settings for a named method; ``None`` for the unregularised baseline.

    ``quacurv`` drops orientation and divergence, ``oriquacurv`` and
    ``oriabscurv`` use the joint energy with quadratic or absolute curvature.
    """
    base = base or EnergyParams()
    if method == "nms":
        return None
    if method == "quacurv":
        return replace(base, lam=0.0, oriented=False, curvature_kind="quadratic")
    if method == "oriquacurv":
        return replace(base, oriented=True, curvature_kind="quadratic")
    if method == "oriabscurv":
        return replace(base, oriented=True, curvature_kind="absolute")
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def regularize(points: PointSet, method: str, base: EnergyParams | None = None,
               neighborhood: str = "grid26", k: int = 6, divergence_mode: str = "same",
               outer_iters: int = 20, sign_iters: int = 1500,
               tangent_options: TangentSolverOptions | None = None,
               init_signs=None) -> tuple[PointSet, SolveReport | None]:
    """Run block-coordinate descent for ``method``; the baseline returns a copy."""
    params = method_params(method, base)
    if params is None or len(points) < 2:
        return points.copy(), None
    if params.length_scale == 1.0 and points.spacing != 1.0:
        params = replace(params, length_scale=points.spacing)
    graph = build_neighborhood(points, neighborhood, k=k, divergence_mode=divergence_mode)
    return block_coordinate_descent(graph, params, outer_iters=outer_iters, sign_iters=sign_iters,
                                    tangent_options=tangent_options, init_signs=init_signs)


def extract_tree(points: PointSet, k: int = 6, complete: bool | None = None,
                 use_line_points: bool = True) -> Forest | None:
    """MST over the (refined) points. ``complete=None`` uses the complete graph up to 2000 points."""
    if len(points) == 0:
        return None
    pos = points.line_points if use_line_points else points.positions
    if complete is None:
        complete = len(points) <= 2000
    # distinct line points can coincide after refinement; nudge exact duplicates apart
    pos = _separate_duplicates(pos, points.spacing)
    graph = build_knn_graph(pos, points.oriented, k=k, complete=complete)
    return minimum_spanning_tree(graph, pos, np.maximum(points.scales, 1e-12), points.voxels)


def _separate_duplicates(pos, spacing):
    _, first, inverse = np.unique(pos, axis=0, return_index=True, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    if len(first) == len(pos):
        return pos
    pos = pos.copy()
    seen = set()
    for i, g in enumerate(inverse):
        if g in seen:
            pos[i] = pos[i] + 1e-9 * spacing * (i + 1)
        seen.add(g)
    return pos


def reconstruct_from_field(fld: VesselnessField, threshold: float, method: str,
                           base: EnergyParams | None = None, **kwargs) -> Forest | None:
    """Threshold, NMS, regularise and extract a tree for one operating point."""
    pts = threshold_and_nms(fld, threshold)
    if len(pts) == 0:
        return None
    out, _ = regularize(pts, method, base, **kwargs)
    return extract_tree(out, use_line_points=method != "nms")
