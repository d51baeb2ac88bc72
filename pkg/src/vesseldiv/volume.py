"""Synthetic vessel volumes with exact centerline ground truth.

A recursive bifurcating generator produces a :class:`CenterlineTree` made of
straight segments; :func:`rasterize` turns it into a CT-like intensity volume
with a Gaussian cross-section profile. Volumes and trees round-trip through
simple text/raw files (see :func:`write_volume` and :func:`write_tree`).

Coordinates are in mm. Voxel ``(i, j, k)`` has its center at
``(i, j, k) * spacing``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "VoxelVolume",
    "Forest",
    "CenterlineTree",
    "SynthesisParams",
    "TreeFitError",
    "VolumeFormatError",
    "MalformedHeaderError",
    "TruncatedPayloadError",
    "DimensionMismatchError",
    "TreeFormatError",
    "synthesize_tree",
    "rasterize",
    "add_gaussian_noise",
    "read_volume",
    "write_volume",
    "read_tree",
    "write_tree",
]

INTENSITY_MAX = 512.0


class TreeFitError(ValueError):
    """Raised when a generated branch cannot be placed inside the volume."""


class VolumeFormatError(ValueError):
    """Base class for volume file problems."""


class MalformedHeaderError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class DimensionMismatchError(VolumeFormatError):
    pass


class TreeFormatError(ValueError):
    pass


@dataclass
class VoxelVolume:
    """Dense scalar grid indexed ``data[i, j, k]`` with isotropic spacing (mm)."""

    data: np.ndarray
    spacing: float

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        self.data = data
        self.spacing = float(self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def extent(self) -> np.ndarray:
        """Coordinate of the last voxel center along each axis (mm)."""
        return (np.asarray(self.dims) - 1) * self.spacing


@dataclass
class Forest:
    """Rooted forest of centerline nodes.

    ``parents[i]`` is the index of node ``i``'s parent, ``-1`` for a root.
    ``radii[i]`` is the radius of the vessel segment ending at node ``i``.
    """

    positions: np.ndarray
    radii: np.ndarray
    parents: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.radii = np.asarray(self.radii, dtype=float).reshape(-1)
        self.parents = np.asarray(self.parents, dtype=np.int64).reshape(-1)
        n = len(self.positions)
        if len(self.radii) != n or len(self.parents) != n:
            raise ValueError("positions, radii and parents must have equal length")
        self.validate()

    def validate(self) -> None:
        n = len(self.positions)
        if n == 0:
            raise ValueError("tree has no nodes")
        if np.any(self.parents >= n) or np.any(self.parents < -1):
            raise ValueError("parent index out of range")
        if not np.all(self.radii > 0):
            raise ValueError("all radii must be positive")
        roots = self.roots
        if len(roots) == 0:
            raise ValueError("parent links contain a cycle (no root)")
        # every node must reach a root without revisiting a node
        depth = np.full(n, -1)
        depth[roots] = 0
        for start in range(n):
            path = []
            seen = set()
            node = start
            while depth[node] < 0:
                if node in seen:
                    raise ValueError(f"parent links contain a cycle through node {node}")
                seen.add(node)
                path.append(node)
                node = self.parents[node]
            d = depth[node]
            for v in reversed(path):
                d += 1
                depth[v] = d

    @property
    def roots(self) -> np.ndarray:
        return np.flatnonzero(self.parents < 0)

    def __len__(self) -> int:
        return len(self.positions)

    def edges(self) -> np.ndarray:
        """``(parent, child)`` index pairs, one per non-root node."""
        child = np.flatnonzero(self.parents >= 0)
        return np.column_stack([self.parents[child], child]).astype(np.int64).reshape(-1, 2)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(len(self), dtype=np.int64)
        e = self.edges()
        np.add.at(deg, e[:, 0], 1)
        np.add.at(deg, e[:, 1], 1)
        return deg

    def bifurcations(self) -> np.ndarray:
        """Indices of degree-3 nodes."""
        return np.flatnonzero(self.degrees() == 3)

    def neighbors(self, i: int) -> list[int]:
        out = [int(c) for c in np.flatnonzero(self.parents == i)]
        if self.parents[i] >= 0:
            out.insert(0, int(self.parents[i]))
        return out

    def adjacency(self) -> list[list[int]]:
        adj = [[] for _ in range(len(self))]
        for a, b in self.edges():
            adj[a].append(int(b))
            adj[b].append(int(a))
        return adj

    def total_length(self) -> float:
        e = self.edges()
        return float(np.linalg.norm(self.positions[e[:, 1]] - self.positions[e[:, 0]], axis=1).sum())


class CenterlineTree(Forest):
    """A :class:`Forest` with exactly one root."""

    def validate(self) -> None:
        super().validate()
        if len(self.roots) != 1:
            raise ValueError(f"tree must have exactly one root, found {len(self.roots)}")

    @property
    def root(self) -> int:
        return int(self.roots[0])


@dataclass
class SynthesisParams:
    """Parameters of the recursive bifurcating tree generator.

    Lengths are in mm, angles in degrees. ``branch_length`` is scaled by
    ``length_decay`` per generation; ``margin`` is the minimum clearance (in
    voxels, added to three local radii) between any node and the volume border.
    """

    depth: int = 3
    branch_length: tuple[float, float] = (0.55, 0.75)
    bifurcation_angle: tuple[float, float] = (25.0, 50.0)
    radius_decay: float = 0.8
    root_radius: float = 0.115
    intensity_peak: float = 512.0
    seed: int = 0
    length_decay: float = 0.8
    dims: tuple[int, int, int] = (100, 100, 100)
    spacing: float = 0.046
    margin: float = 2.0
    max_attempts: int = 200

    def validate(self) -> None:
        if int(self.depth) != self.depth or self.depth < 1:
            raise ValueError(f"depth must be an integer >= 1, got {self.depth}")
        if not 0 < self.radius_decay < 1:
            raise ValueError(f"radius_decay must lie in (0, 1), got {self.radius_decay}")
        lo, hi = self.bifurcation_angle
        if not 0 < lo <= hi < 90:
            raise ValueError(f"bifurcation_angle range must lie within (0, 90) degrees, got {self.bifurcation_angle}")
        lo, hi = self.branch_length
        if not 0 < lo <= hi:
            raise ValueError(f"invalid branch_length range {self.branch_length}")
        if self.root_radius <= 0 or self.spacing <= 0 or self.length_decay <= 0:
            raise ValueError("root_radius, spacing and length_decay must be positive")
        if min(self.dims) < 1:
            raise ValueError(f"dims must be >= 1, got {self.dims}")


def _unit(v):
    return v / np.linalg.norm(v)


def _perpendicular_basis(d):
    """Two unit vectors completing ``d`` to an orthonormal frame."""
    d = _unit(np.asarray(d, dtype=float))
    helper = np.eye(3)[int(np.argmin(np.abs(d)))]
    u = _unit(np.cross(d, helper))
    w = np.cross(d, u)
    return u, w


def _segment_distance(p0, p1, q0, q1):
    """Minimum distance between segments ``[p0, p1]`` and ``[q0, q1]``."""
    d1, d2, r = p1 - p0, q1 - q0, p0 - q0
    a, e, f = d1 @ d1, d2 @ d2, d2 @ r
    c, b = d1 @ r, d1 @ d2
    denom = a * e - b * b
    s = np.clip((b * f - c * e) / denom, 0.0, 1.0) if denom > 1e-14 else 0.0
    t = (b * s + f) / e
    if t < 0.0:
        t, s = 0.0, np.clip(-c / a, 0.0, 1.0)
    elif t > 1.0:
        t, s = 1.0, np.clip((b - c) / a, 0.0, 1.0)
    return float(np.linalg.norm(p0 + d1 * s - (q0 + d2 * t)))


def synthesize_tree(params: SynthesisParams) -> CenterlineTree:
    """Grow a binary bifurcating tree that fits inside ``params.dims``.

    The root segment starts near the centre of the ``z = 0`` face pointing
    along ``+z``. At each bifurcation the two children leave the parent
    direction at independent angles drawn from ``bifurcation_angle``, on
    opposite sides of a randomly rotated plane containing the parent direction.
    Branches that leave the volume or come too close to a non-adjacent branch
    are resampled; after ``max_attempts`` failures a :class:`TreeFitError` names
    the offending branch.
    """
    params.validate()
    rng = np.random.default_rng(params.seed)
    h = params.spacing
    upper = (np.asarray(params.dims) - 1) * h

    positions: list[np.ndarray] = []
    radii: list[float] = []
    parents: list[int] = []
    segments: list[tuple[int, int]] = []

    def fits(p, r):
        m = (params.margin + 3.0 * r / h) * h
        return bool(np.all(p >= m) and np.all(p <= upper - m))

    def clear_of_others(a, b, r, skip):
        for i, j in segments:
            if i in skip or j in skip:
                continue
            gap = _segment_distance(a, b, positions[i], positions[j])
            if gap < r + radii[j] + 2.0 * h:
                return False
        return True

    start = np.array([upper[0] / 2, upper[1] / 2, 0.0])
    start[2] = (params.margin + 3.0 * params.root_radius / h) * h
    direction = np.array([0.0, 0.0, 1.0])
    lo, hi = params.branch_length
    root_len = rng.uniform(lo, hi)
    first = start + root_len * direction
    if not fits(first, params.root_radius):
        raise TreeFitError(f"root segment {start.tolist()} -> {first.tolist()} leaves the volume")
    positions += [start, first]
    radii += [params.root_radius, params.root_radius]
    parents += [-1, 0]
    segments.append((0, 1))

    def grow(node: int, d: np.ndarray, generation: int, radius: float):
        child_r = radius * params.radius_decay
        scale = params.length_decay ** generation
        p = positions[node]
        skip = {node, parents[node]}
        for _ in range(params.max_attempts):
            phi = rng.uniform(0.0, 2.0 * np.pi)
            u, w = _perpendicular_basis(d)
            side = math.cos(phi) * u + math.sin(phi) * w
            angles = np.radians(rng.uniform(*params.bifurcation_angle, size=2))
            lengths = rng.uniform(lo, hi, size=2) * scale
            dirs = [math.cos(angles[0]) * d + math.sin(angles[0]) * side,
                    math.cos(angles[1]) * d - math.sin(angles[1]) * side]
            ends = [p + L * _unit(v) for L, v in zip(lengths, dirs)]
            if all(fits(e, child_r) for e in ends) and all(
                clear_of_others(p, e, child_r, skip) for e in ends
            ):
                break
        else:
            raise TreeFitError(
                f"branch from node {node} at {np.round(p, 4).tolist()} (generation {generation}) "
                f"cannot be placed inside dims {tuple(params.dims)} after {params.max_attempts} attempts"
            )
        children = []
        for e in ends:
            positions.append(e)
            radii.append(child_r)
            parents.append(node)
            segments.append((node, len(positions) - 1))
            children.append(len(positions) - 1)
        if generation < params.depth:
            for c, v in zip(children, dirs):
                grow(c, _unit(v), generation + 1, child_r)

    grow(1, direction, 1, params.root_radius)
    return CenterlineTree(np.array(positions), np.array(radii), np.array(parents))


def _segment_distance_field(coords, a, b):
    """Distance from each grid point to segment ``[a, b]``; coords is a tuple of axes."""
    x, y, z = coords
    ab = b - a
    L2 = float(ab @ ab)
    px, py, pz = x - a[0], y - a[1], z - a[2]
    if L2 == 0.0:
        return np.sqrt(px**2 + py**2 + pz**2)
    t = np.clip((px * ab[0] + py * ab[1] + pz * ab[2]) / L2, 0.0, 1.0)
    dx, dy, dz = px - t * ab[0], py - t * ab[1], pz - t * ab[2]
    return np.sqrt(dx * dx + dy * dy + dz * dz)


def rasterize(tree: CenterlineTree, dims, spacing: float, intensity_peak: float = 512.0) -> VoxelVolume:
    """Render ``tree`` as Gaussian-profile tubes.

    Each voxel takes ``intensity_peak * exp(-d**2 / (2 r**2))`` maximised over
    segments, ``d`` being the distance to the segment and ``r`` the radius of
    the segment's child node. Values are clamped to ``[0, 512]``.
    """
    dims = tuple(int(n) for n in dims)
    axes = [np.arange(n, dtype=float) * spacing for n in dims]
    coords = (axes[0][:, None, None], axes[1][None, :, None], axes[2][None, None, :])
    out = np.zeros(dims, dtype=float)
    for parent, child in tree.edges():
        r = tree.radii[child]
        d = _segment_distance_field(coords, tree.positions[parent], tree.positions[child])
        np.maximum(out, intensity_peak * np.exp(-(d * d) / (2.0 * r * r)), out=out)
    np.clip(out, 0.0, INTENSITY_MAX, out=out)
    return VoxelVolume(out.astype(np.float32), spacing)


def add_gaussian_noise(vol: VoxelVolume, sigma: float, seed=None) -> VoxelVolume:
    """Add i.i.d. ``N(0, sigma**2)`` noise to every voxel (no clamping)."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return VoxelVolume(vol.data.copy(), vol.spacing)
    rng = np.random.default_rng(seed)
    noisy = vol.data.astype(float) + rng.normal(0.0, sigma, size=vol.dims)
    return VoxelVolume(noisy.astype(np.float32), vol.spacing)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

_HEADER_KEYS = ("dims", "spacing", "dtype", "byte_order", "data_file")


def write_volume(vol: VoxelVolume, header_path) -> Path:
    """Write ``<name>.hdr`` (key: value text) and the raw little-endian float32 payload.

    The payload stores x fastest, then y, then z. Returns the payload path.
    """
    header_path = Path(header_path)
    raw_path = header_path.with_suffix(".raw")
    nx, ny, nz = vol.dims
    header = (
        "format: vesseldiv-volume\n"
        f"dims: {nx} {ny} {nz}\n"
        f"spacing: {float(vol.spacing)!r}\n"
        "dtype: float32\n"
        "byte_order: little\n"
        "order: x-fastest\n"
        f"data_file: {raw_path.name}\n"
    )
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header_path.write_text(header)
    raw_path.write_bytes(vol.data.astype("<f4").tobytes(order="F"))
    return raw_path


def _parse_header(text: str) -> dict:
    fields = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if ":" not in line:
            raise MalformedHeaderError(f"line {lineno}: expected 'key: value', got {line!r}")
        key, value = line.split(":", 1)
        fields[key.strip()] = value.strip()
    missing = [k for k in _HEADER_KEYS if k not in fields]
    if missing:
        raise MalformedHeaderError(f"header is missing keys: {', '.join(missing)}")
    return fields


def read_volume(header_path) -> VoxelVolume:
    header_path = Path(header_path)
    fields = _parse_header(header_path.read_text())
    try:
        dims = tuple(int(v) for v in fields["dims"].split())
        spacing = float(fields["spacing"])
    except ValueError as exc:
        raise MalformedHeaderError(f"unparseable dims/spacing: {exc}") from None
    if len(dims) != 3 or min(dims) < 1 or not spacing > 0:
        raise MalformedHeaderError(f"invalid dims {fields['dims']!r} or spacing {fields['spacing']!r}")
    if fields["dtype"] != "float32" or fields["byte_order"] != "little":
        raise MalformedHeaderError(
            f"unsupported dtype/byte order {fields['dtype']}/{fields['byte_order']}"
        )
    if fields.get("order", "x-fastest") != "x-fastest":
        raise MalformedHeaderError(f"unsupported order {fields['order']!r}")
    raw_path = header_path.parent / fields["data_file"]
    payload = raw_path.read_bytes()
    expected = 4 * dims[0] * dims[1] * dims[2]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{raw_path}: {len(payload)} bytes, header requires {expected}")
    if len(payload) != expected:
        raise DimensionMismatchError(
            f"{raw_path}: {len(payload)} bytes does not match dims {dims} ({expected} bytes)"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F")
    return VoxelVolume(data.astype(np.float32), spacing)


def write_tree(tree: Forest, path) -> None:
    """One node per line: ``id parent x y z radius`` (mm), root parent ``-1``."""
    lines = ["# id parent x y z radius"]
    for i, (p, r, par) in enumerate(zip(tree.positions, tree.radii, tree.parents)):
        lines.append(f"{i} {int(par)} {float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {float(r)!r}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def read_tree(path, allow_forest: bool = False) -> Forest:
    """Read a tree file; several roots are accepted only with ``allow_forest``."""
    rows = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6:
            raise TreeFormatError(f"line {lineno}: expected 6 fields, got {len(parts)}")
        try:
            node, parent = int(parts[0]), int(parts[1])
            values = [float(v) for v in parts[2:]]
        except ValueError:
            raise TreeFormatError(f"line {lineno}: unparseable values {line!r}") from None
        if node in rows:
            raise TreeFormatError(f"line {lineno}: duplicate node id {node}")
        rows[node] = (parent, values)
    if not rows:
        raise TreeFormatError("tree file has no nodes")
    ids = sorted(rows)
    index = {node: i for i, node in enumerate(ids)}
    parents = []
    for node in ids:
        parent = rows[node][0]
        if parent == -1:
            parents.append(-1)
        elif parent in index:
            parents.append(index[parent])
        else:
            raise TreeFormatError(f"node {node} references unknown parent {parent}")
    values = np.array([rows[node][1] for node in ids])
    try:
        cls = Forest if allow_forest else CenterlineTree
        return cls(values[:, :3], values[:, 3], parents)
    except ValueError as exc:
        raise TreeFormatError(str(exc)) from None
