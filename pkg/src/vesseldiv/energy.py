"""Pairwise curvature, data fidelity, divergence penalty and the joint energy.

Scalar functions act on :class:`~vesseldiv.vesselness.TangentPoint`; the
``*_terms`` helpers evaluate the same quantities for whole arrays and are
what the solvers use. Both paths share the same formulas.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .field import NeighborGraph, negative_part, pair_divergences, positive_part
from .vesselness import PointSet, TangentPoint

__all__ = [
    "EnergyParams",
    "EnergyBreakdown",
    "curvature_quadratic",
    "curvature_absolute",
    "curvature_oriented",
    "data_term",
    "hinge",
    "softplus_hinge",
    "curvature_terms",
    "data_terms",
    "total_energy",
]

CURVATURE_KINDS = ("quadratic", "absolute")
DIVERGENCE_SENSES = ("penalize_negative", "penalize_positive")


@dataclass
class EnergyParams:
    """Model constants.

    ``oriented=False`` switches the curvature to the sign-ignoring form
    without saturation. ``length_scale`` divides all distances in the data
    term so it can be expressed in voxels while positions are in mm.
    """

    gamma: float = 3.80
    lam: float = 18.06
    tau: float = math.cos(math.radians(70.0))
    curvature_kind: str = "quadratic"
    divergence_sense: str = "penalize_negative"
    hinge_sharpness: float = 20.0
    oriented: bool = True
    length_scale: float = 1.0

    def validate(self) -> None:
        if self.gamma < 0 or self.lam < 0:
            raise ValueError("gamma and lam must be non-negative")
        if not 0 <= self.tau < 1:
            raise ValueError("tau must lie in [0, 1)")
        if self.curvature_kind not in CURVATURE_KINDS:
            raise ValueError(f"curvature_kind must be one of {CURVATURE_KINDS}")
        if self.divergence_sense not in DIVERGENCE_SENSES:
            raise ValueError(f"divergence_sense must be one of {DIVERGENCE_SENSES}")
        if not self.hinge_sharpness > 0:
            raise ValueError("hinge_sharpness must be positive")
        if not self.length_scale > 0:
            raise ValueError("length_scale must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EnergyBreakdown:
    """Weighted energy contributions; ``total`` is their sum."""

    data: float
    curvature: float
    divergence: float
    total: float


def _perp_norms(lp, tp, lq, tq):
    """``|P_tq e|`` and ``|P_tp e|`` for the unit chord ``e`` between line points."""
    delta = lp - lq
    dist = np.linalg.norm(delta, axis=-1)
    if np.any(dist == 0):
        raise ValueError("coincident line points")
    e = delta / dist[..., None]
    a = e - np.sum(tq * e, axis=-1)[..., None] * tq
    b = e - np.sum(tp * e, axis=-1)[..., None] * tp
    return np.linalg.norm(a, axis=-1), np.linalg.norm(b, axis=-1)


def curvature_quadratic(p: TangentPoint, q: TangentPoint) -> float:
    """``(d(p, L_q)**2 + d(q, L_p)**2) / (2 |p - q|**2)`` on line points."""
    a, b = _perp_norms(p.line_point, p.tangent, q.line_point, q.tangent)
    return float(0.5 * (a * a + b * b))


def curvature_absolute(p: TangentPoint, q: TangentPoint) -> float:
    """``(d(p, L_q) + d(q, L_p)) / (2 |p - q|)`` on line points."""
    a, b = _perp_norms(p.line_point, p.tangent, q.line_point, q.tangent)
    return float(0.5 * (a + b))


def curvature_oriented(p: TangentPoint, q: TangentPoint, params: EnergyParams) -> float:
    """Underlying curvature when oriented tangents agree up to ``tau``, else exactly 1."""
    if float(np.dot(p.oriented, q.oriented)) < params.tau:
        return 1.0
    if params.curvature_kind == "absolute":
        return curvature_absolute(p, q)
    return curvature_quadratic(p, q)


def data_term(pt: TangentPoint, length_scale: float = 1.0) -> float:
    """Squared distance from the raw position to the point's tangent line."""
    d = pt.position - pt.line_point
    d = d - np.dot(d, pt.tangent) * pt.tangent
    return float(np.dot(d, d)) / length_scale**2


def hinge(div, sense: str = "penalize_negative"):
    return negative_part(div) if sense == "penalize_negative" else positive_part(div)


def softplus_hinge(div, sharpness: float, sense: str = "penalize_negative"):
    """Smooth hinge ``log(1 + exp(-beta a)) / beta`` (mirrored for the positive sense)."""
    a = -np.asarray(div, dtype=float) if sense == "penalize_negative" else np.asarray(div, dtype=float)
    return np.logaddexp(0.0, sharpness * a) / sharpness


def curvature_terms(points: PointSet, pairs: np.ndarray, params: EnergyParams,
                    signs: np.ndarray | None = None) -> np.ndarray:
    """Unweighted per-pair curvature, gated and saturated when ``params.oriented``."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        return np.zeros(0)
    i, j = pairs[:, 0], pairs[:, 1]
    t = points.tangents
    a, b = _perp_norms(points.line_points[i], t[i], points.line_points[j], t[j])
    kappa = 0.5 * (a + b) if params.curvature_kind == "absolute" else 0.5 * (a * a + b * b)
    if params.oriented:
        s = points.signs if signs is None else signs
        dot = s[i] * s[j] * np.einsum("ij,ij->i", t[i], t[j])
        kappa = np.where(dot >= params.tau, kappa, 1.0)
    return kappa


def data_terms(points: PointSet, length_scale: float = 1.0) -> np.ndarray:
    d = points.positions - points.line_points
    d = d - np.einsum("ij,ij->i", d, points.tangents)[:, None] * points.tangents
    return np.einsum("ij,ij->i", d, d) / length_scale**2


def total_energy(graph: NeighborGraph, params: EnergyParams,
                 points: PointSet | None = None) -> EnergyBreakdown:
    """Joint energy of the graph's point state (or of ``points`` on the same graph).

    Sums use compensated (``math.fsum``) accumulation.
    """
    pts = graph.points if points is None else points
    data = math.fsum(data_terms(pts, params.length_scale))
    curv = params.gamma * math.fsum(curvature_terms(pts, graph.curvature_pairs, params))
    div = 0.0
    if params.lam > 0 and len(graph.divergence_pairs):
        d = pair_divergences(pts.positions, pts.oriented, graph.divergence_pairs, graph.facet_area)
        div = params.lam * math.fsum(hinge(d, params.divergence_sense))
    return EnergyBreakdown(data, curv, div, math.fsum([data, curv, div]))
