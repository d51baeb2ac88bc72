"""Multiscale Hessian vesselness, tangent estimation and non-maximum suppression.

The output of this stage is a sparse :class:`PointSet`: one entry per voxel
that survives thresholding and NMS, carrying the raw position, the filter's
orientation-ambiguous unit tangent, a binary sign (initialised to ``+1``), the
selected scale and the vesselness score.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

from .eigen import eigh3
from .volume import VoxelVolume

__all__ = [
    "FrangiParams",
    "TangentPoint",
    "PointSet",
    "hessian_at_scale",
    "frangi_response",
    "frangi_from_eigen",
    "multiscale_frangi",
    "VesselnessField",
    "default_threshold",
    "threshold_and_nms",
    "read_points",
    "write_points",
]


@dataclass
class FrangiParams:
    """Frangi filter constants; scales are in mm.

    ``threshold=None`` selects the per-volume default that keeps the top 2 %
    of voxels (:func:`default_threshold`).
    """

    alpha: float = 0.5
    beta: float = 0.5
    gamma_f: float = 30.0
    sigma_min: float = 0.023
    sigma_max: float = 0.1152
    n_scales: int = 5
    threshold: float | None = None

    def validate(self) -> None:
        if not 0 < self.sigma_min <= self.sigma_max:
            raise ValueError(f"need 0 < sigma_min <= sigma_max, got {self.sigma_min}, {self.sigma_max}")
        if self.n_scales < 1:
            raise ValueError("n_scales must be >= 1")
        if min(self.alpha, self.beta, self.gamma_f) <= 0:
            raise ValueError("alpha, beta and gamma_f must be positive")
        if self.threshold is not None and not self.threshold > 0:
            raise ValueError("threshold must be positive")

    def scales(self) -> np.ndarray:
        return np.geomspace(self.sigma_min, self.sigma_max, self.n_scales)


@dataclass
class TangentPoint:
    """One detected centerline sample.

    ``position`` is the raw detection, ``line_point`` the current point of
    tangency on the estimated line; ``sign * tangent`` is the oriented tangent.
    """

    position: np.ndarray
    tangent: np.ndarray
    sign: int = 1
    scale: float = 0.0
    vesselness: float = 0.0
    line_point: np.ndarray | None = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        t = np.asarray(self.tangent, dtype=float)
        norm = np.linalg.norm(t)
        if norm == 0:
            raise ValueError("tangent must be non-zero")
        self.tangent = t / norm
        if self.sign not in (-1, 1):
            raise ValueError(f"sign must be -1 or +1, got {self.sign}")
        self.line_point = self.position.copy() if self.line_point is None else np.asarray(self.line_point, dtype=float)

    @property
    def oriented(self) -> np.ndarray:
        return self.sign * self.tangent


@dataclass
class PointSet:
    """Array-of-structures view of many :class:`TangentPoint`.

    All arrays share the leading dimension ``n``. ``voxels`` holds integer
    voxel coordinates and is derived from ``positions`` when omitted.
    """

    positions: np.ndarray
    tangents: np.ndarray
    scales: np.ndarray
    vesselness: np.ndarray
    spacing: float = 1.0
    signs: np.ndarray | None = None
    line_points: np.ndarray | None = None
    voxels: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        n = len(self.positions)
        t = np.asarray(self.tangents, dtype=float).reshape(-1, 3)
        norms = np.linalg.norm(t, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("tangents must be non-zero")
        # leave already-unit rows untouched so repeated construction is bit-stable
        self.tangents = np.where(np.abs(norms - 1.0) > 1e-12, t / norms, t)
        self.scales = np.asarray(self.scales, dtype=float).reshape(-1)
        self.vesselness = np.asarray(self.vesselness, dtype=float).reshape(-1)
        self.signs = (np.ones(n, dtype=np.int64) if self.signs is None
                      else np.asarray(self.signs, dtype=np.int64).reshape(-1))
        if not np.all(np.abs(self.signs) == 1):
            raise ValueError("signs must be -1 or +1")
        self.line_points = (self.positions.copy() if self.line_points is None
                            else np.asarray(self.line_points, dtype=float).reshape(-1, 3))
        if self.voxels is None:
            self.voxels = np.rint(self.positions / self.spacing).astype(np.int64)
        self.voxels = np.asarray(self.voxels, dtype=np.int64).reshape(-1, 3)
        for name in ("tangents", "scales", "vesselness", "signs", "line_points", "voxels"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> TangentPoint:
        return TangentPoint(self.positions[i], self.tangents[i], int(self.signs[i]),
                            float(self.scales[i]), float(self.vesselness[i]), self.line_points[i].copy())

    @property
    def oriented(self) -> np.ndarray:
        return self.signs[:, None] * self.tangents

    def copy(self) -> "PointSet":
        return PointSet(self.positions.copy(), self.tangents.copy(), self.scales.copy(),
                        self.vesselness.copy(), self.spacing, self.signs.copy(),
                        self.line_points.copy(), self.voxels.copy())

    def subset(self, mask) -> "PointSet":
        return PointSet(self.positions[mask], self.tangents[mask], self.scales[mask],
                        self.vesselness[mask], self.spacing, self.signs[mask],
                        self.line_points[mask], self.voxels[mask])

    @classmethod
    def from_points(cls, points, spacing: float = 1.0) -> "PointSet":
        points = list(points)
        return cls(
            np.array([p.position for p in points]).reshape(-1, 3),
            np.array([p.tangent for p in points]).reshape(-1, 3),
            np.array([p.scale for p in points]),
            np.array([p.vesselness for p in points]),
            spacing,
            np.array([p.sign for p in points], dtype=np.int64),
            np.array([p.line_point for p in points]).reshape(-1, 3),
        )


def hessian_at_scale(vol: VoxelVolume, sigma: float) -> np.ndarray:
    """Scale-normalised Hessian ``sigma**2 * D^2 (G_sigma * I)`` per voxel.

    The volume is Gaussian-smoothed, then differentiated with zero-sum central
    difference stencils. Sampled derivative-of-Gaussian kernels are avoided on
    purpose: below about one voxel they have a non-zero DC response that turns
    bright flat regions into spurious tubes.

    Returns an array of shape ``vol.dims + (3, 3)``; ``sigma`` is in mm.
    """
    if sigma < vol.spacing / 2:
        raise ValueError(f"sigma={sigma} mm is below the resolvable limit of {vol.spacing / 2} mm")
    s = sigma / vol.spacing
    g = ndi.gaussian_filter(vol.data.astype(float), s, mode="nearest")
    # derivative in mm scaled by sigma_mm**2 == derivative in voxels scaled by s**2
    norm = s * s
    first = [ndi.correlate1d(g, [-0.5, 0.0, 0.5], axis=i, mode="nearest") for i in range(3)]
    h = np.empty(vol.dims + (3, 3))
    for i in range(3):
        h[..., i, i] = ndi.correlate1d(g, [1.0, -2.0, 1.0], axis=i, mode="nearest") * norm
        for j in range(i + 1, 3):
            d = ndi.correlate1d(first[i], [-0.5, 0.0, 0.5], axis=j, mode="nearest") * norm
            h[..., i, j] = d
            h[..., j, i] = d
    return h


def _tie_break(vecs):
    """Pick, per row, the candidate vector with lexicographically largest |components|."""
    a = np.abs(vecs)  # (n, k, 3)
    best = np.zeros(len(vecs), dtype=np.int64)
    for k in range(1, vecs.shape[1]):
        cur = a[np.arange(len(a)), best]
        cand = a[:, k]
        diff = cand - cur
        # first non-zero component of the difference decides
        nz = np.abs(diff) > 1e-12
        first = np.where(nz.any(axis=1), nz.argmax(axis=1), 0)
        better = diff[np.arange(len(a)), first] > 1e-12
        best = np.where(better, k, best)
    return best


def frangi_from_eigen(w: np.ndarray, v: np.ndarray, params: FrangiParams):
    """Vesselness and tangent from ascending eigenvalues ``w`` and column eigenvectors ``v``.

    Bright-on-dark tubes: the response is zero unless the two largest-magnitude
    eigenvalues are negative.
    """
    shape = w.shape[:-1]
    w = w.reshape(-1, 3)
    v = v.reshape(-1, 3, 3)
    n = len(w)
    aw = np.abs(w)
    order = np.argsort(aw, axis=1, kind="stable")
    lam = np.take_along_axis(w, order, axis=1)
    vecs = np.take_along_axis(v, order[:, None, :], axis=2)
    l1, l2, l3 = lam[:, 0], lam[:, 1], lam[:, 2]
    a1, a2, a3 = np.abs(l1), np.abs(l2), np.abs(l3)

    tangent = vecs[:, :, 0].copy()
    scale = np.maximum(a3, 1e-300)
    tie2 = (a2 - a1) <= 1e-12 * scale
    if tie2.any():
        tie3 = tie2 & ((a3 - a1) <= 1e-12 * scale)
        idx = np.flatnonzero(tie2)
        k = np.where(tie3[idx], 3, 2)
        cands = np.transpose(vecs[idx], (0, 2, 1))  # (m, 3 candidates, 3 comps)
        choice = np.zeros(len(idx), dtype=np.int64)
        for kk in (2, 3):
            sel = k == kk
            if sel.any():
                choice[sel] = _tie_break(cands[sel, :kk])
        tangent[idx] = cands[np.arange(len(idx)), choice]

    valid = (l2 < 0) & (l3 < 0) & (a3 > 0)
    ra = np.divide(a2, a3, out=np.zeros(n), where=a3 > 0)
    denom = np.sqrt(a2 * a3)
    rb = np.divide(a1, denom, out=np.zeros(n), where=denom > 0)
    s2 = l1 * l1 + l2 * l2 + l3 * l3
    vessel = (
        -np.expm1(-(ra * ra) / (2.0 * params.alpha**2))
        * np.exp(-(rb * rb) / (2.0 * params.beta**2))
        * -np.expm1(-s2 / (2.0 * params.gamma_f**2))
    )
    vessel = np.where(valid, vessel, 0.0)
    return vessel.reshape(shape), tangent.reshape(shape + (3,))


def frangi_response(h: np.ndarray, params: FrangiParams):
    """Vesselness in ``[0, 1]`` and unit tangent for one or many symmetric 3x3 matrices."""
    h = np.asarray(h, dtype=float)
    if np.abs(h - np.swapaxes(h, -1, -2)).max(initial=0.0) > 1e-9:
        raise ValueError("Hessian must be symmetric")
    w, v = eigh3(h)
    return frangi_from_eigen(w, v, params)


@dataclass
class VesselnessField:
    vesselness: np.ndarray
    tangents: np.ndarray
    scales: np.ndarray
    spacing: float
    sigmas: np.ndarray = field(default_factory=lambda: np.zeros(0))


def multiscale_frangi(vol: VoxelVolume, params: FrangiParams) -> VesselnessField:
    """Per-voxel maximum of the Frangi response over a geometric scale ladder.

    Ties between scales keep the smaller scale.
    """
    params.validate()
    sigmas = params.scales()
    best = np.full(vol.dims, -1.0)
    tangents = np.zeros(vol.dims + (3,))
    scales = np.zeros(vol.dims)
    for sigma in sigmas:
        w, v = eigh3(hessian_at_scale(vol, sigma))
        resp, tan = frangi_from_eigen(w, v, params)
        better = resp > best
        best[better] = resp[better]
        tangents[better] = tan[better]
        scales[better] = sigma
    return VesselnessField(np.maximum(best, 0.0), tangents, scales, vol.spacing, sigmas)


def default_threshold(vesselness: np.ndarray, keep_fraction: float = 0.02) -> float:
    """Threshold keeping the top ``keep_fraction`` of voxels (always > 0)."""
    q = float(np.quantile(vesselness, 1.0 - keep_fraction))
    if q > 0:
        return q
    positive = vesselness[vesselness > 0]
    return float(positive.min()) if positive.size else float("inf")


def _perpendicular_pairs(t):
    """Orthonormal vectors ``u, w`` spanning the plane orthogonal to each row of ``t``."""
    helper = np.zeros_like(t)
    helper[np.arange(len(t)), np.argmin(np.abs(t), axis=1)] = 1.0
    u = np.cross(t, helper)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    w = np.cross(t, u)
    return u, w


def threshold_and_nms(fld: VesselnessField, threshold: float) -> PointSet:
    """Keep voxels above ``threshold`` that are strict maxima across the vessel.

    The response is probed by trilinear interpolation one voxel away along two
    orthogonal directions in the plane normal to the tangent (four probes).
    Voxels on the volume border, which lack a full probe stencil, are dropped.
    Points are ordered by x-fastest linear voxel index.
    """
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    v = fld.vesselness
    dims = np.asarray(v.shape)
    cand = np.argwhere(v >= threshold)
    inner = np.all((cand >= 1) & (cand <= dims - 2), axis=1)
    cand = cand[inner]
    if len(cand) == 0:
        return _empty_points(fld.spacing)
    t = fld.tangents[tuple(cand.T)]
    u, w = _perpendicular_pairs(t)
    center = v[tuple(cand.T)]
    keep = np.ones(len(cand), dtype=bool)
    for d in (u, -u, w, -w):
        probe = ndi.map_coordinates(v, (cand + d).T, order=1, mode="nearest")
        keep &= center > probe
    cand = cand[keep]
    linear = cand[:, 0] + dims[0] * (cand[:, 1] + dims[1] * cand[:, 2])
    cand = cand[np.argsort(linear, kind="stable")]
    idx = tuple(cand.T)
    return PointSet(cand * fld.spacing, fld.tangents[idx], fld.scales[idx], v[idx],
                    fld.spacing, voxels=cand)


def _empty_points(spacing):
    z = np.zeros((0, 3))
    return PointSet(z, z, np.zeros(0), np.zeros(0), spacing, voxels=np.zeros((0, 3), dtype=np.int64))


def write_points(points: PointSet, path, oriented: bool = False, use_line_points: bool = False) -> None:
    """Text point set, one point per line: ``x y z tx ty tz scale vesselness`` (mm).

    With ``oriented`` the tangent column holds ``sign * tangent``; with
    ``use_line_points`` the position columns hold the refined line points.
    """
    pos = points.line_points if use_line_points else points.positions
    tan = points.oriented if oriented else points.tangents
    lines = ["# x y z tx ty tz scale vesselness"]
    for p, t, s, val in zip(pos, tan, points.scales, points.vesselness):
        lines.append(" ".join(repr(float(x)) for x in (*p, *t, s, val)))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def read_points(path, spacing: float) -> PointSet:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"{path}:{lineno}: expected 8 columns, got {len(parts)}")
        rows.append([float(x) for x in parts])
    if not rows:
        return _empty_points(spacing)
    a = np.array(rows)
    return PointSet(a[:, :3], a[:, 3:6], a[:, 6], a[:, 7], spacing)
