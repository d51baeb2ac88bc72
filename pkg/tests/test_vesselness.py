import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vesseldiv.vesselness import (
    FrangiParams,
    PointSet,
    TangentPoint,
    VesselnessField,
    default_threshold,
    frangi_from_eigen,
    frangi_response,
    hessian_at_scale,
    multiscale_frangi,
    read_points,
    threshold_and_nms,
    write_points,
)
from vesseldiv.volume import VoxelVolume

H = 0.046
P = FrangiParams()

# (1 - e^-2) (1 - e^(-8/1800)) and (1 - e^-2) e^-2 (1 - e^(-12/1800)), 30-digit evaluation
TUBE_RESPONSE = 0.00383442703594542522571644885447
BLOB_RESPONSE = 0.00077753629490757610005897395984


def tube_volume(r, n=32, peak=512.0):
    g = np.arange(n, dtype=float)
    x, y = np.meshgrid(g, g, indexing="ij")
    c = n // 2
    prof = peak * np.exp(-((x - c) ** 2 + (y - c) ** 2) / (2 * r * r))
    return VoxelVolume(np.repeat(prof[:, :, None], n, axis=2), H)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    return q if np.linalg.det(q) > 0 else -q


# ----------------------------------------------------------------- params

def test_param_invariants():
    with pytest.raises(ValueError):
        FrangiParams(sigma_min=0.2, sigma_max=0.1).validate()
    with pytest.raises(ValueError):
        FrangiParams(n_scales=0).validate()
    with pytest.raises(ValueError):
        FrangiParams(alpha=0.0).validate()
    assert np.allclose(P.scales()[[0, -1]], [0.023, 0.1152])


def test_tangent_point_defaults():
    pt = TangentPoint([1.0, 2.0, 3.0], [0.0, 0.0, 2.0])
    assert np.linalg.norm(pt.tangent) == pytest.approx(1.0, abs=1e-9)
    assert pt.sign == 1
    assert np.array_equal(pt.line_point, pt.position)
    with pytest.raises(ValueError):
        TangentPoint([0, 0, 0], [1, 0, 0], sign=0)


# ---------------------------------------------------------------- hessian

def test_constant_volume_zero_hessian():
    vol = VoxelVolume(np.full((9, 9, 9), 7.0), H)
    assert np.abs(hessian_at_scale(vol, 0.05)).max() < 1e-9
    fld = multiscale_frangi(vol, P)
    assert np.all(fld.vesselness == 0)


def test_quadratic_volume_hessian():
    g = np.arange(20, dtype=float)
    x = np.meshgrid(g, g, g, indexing="ij")[0]
    vol = VoxelVolume(x * x, 1.0)
    sigma = 1.0
    h = hessian_at_scale(vol, sigma) / sigma**2
    inner = h[6:-6, 6:-6, 6:-6].reshape(-1, 3, 3)
    assert np.allclose(inner, np.diag([2.0, 0.0, 0.0]), rtol=1e-3, atol=2e-3)


def test_gaussian_blob_hessian_isotropic_negative():
    n, s0 = 21, 2.0
    g = np.arange(n, dtype=float) - n // 2
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    vol = VoxelVolume(100.0 * np.exp(-(x * x + y * y + z * z) / (2 * s0 * s0)), 1.0)
    h = hessian_at_scale(vol, 1.5)[n // 2, n // 2, n // 2]
    d = np.diag(h)
    assert np.all(d < 0)
    assert np.ptp(d) <= 1e-5 * abs(d).max()
    off = h[~np.eye(3, dtype=bool)]
    assert np.all(np.abs(off) < 1e-6 * abs(d).max())


def test_sigma_below_resolution_rejected():
    vol = VoxelVolume(np.zeros((5, 5, 5)), H)
    with pytest.raises(ValueError, match="resolvable"):
        hessian_at_scale(vol, 0.4 * H)


# ---------------------------------------------------------------- frangi

def test_zero_hessian_zero_response():
    v, t = frangi_response(np.zeros((3, 3)), P)
    assert v == 0.0
    assert np.linalg.norm(t) == pytest.approx(1.0)


def test_ideal_tube_response():
    v, t = frangi_response(np.diag([0.0, -2.0, -2.0]), P)
    assert v == pytest.approx(TUBE_RESPONSE, rel=1e-12)
    assert np.allclose(np.abs(t), [1.0, 0.0, 0.0])


def test_blob_response():
    v, _ = frangi_response(np.diag([-2.0, -2.0, -2.0]), P)
    assert v == pytest.approx(BLOB_RESPONSE, rel=1e-12)
    tube_same_s, _ = frangi_response(np.diag([0.0, -np.sqrt(6.0), -np.sqrt(6.0)]), P)
    # equal S: the blob sits exactly exp(-1/(2 beta^2)) below the tube
    assert v / tube_same_s == pytest.approx(np.exp(-1.0 / (2 * P.beta**2)), rel=1e-12)


@pytest.mark.parametrize("diag", [(0.0, 2.0, -2.0), (0.0, -2.0, 2.0), (-1.0, 3.0, 4.0)])
def test_dark_or_positive_structures_zero(diag):
    v, _ = frangi_response(np.diag(diag), P)
    assert v == 0.0


def test_asymmetric_input_rejected():
    with pytest.raises(ValueError):
        frangi_response(np.array([[0, 1.0, 0], [0, 0, 0], [0, 0, 0]]), P)


def test_response_in_unit_interval():
    rng = np.random.default_rng(3)
    m = rng.normal(scale=50, size=(2000, 3, 3))
    v, t = frangi_response(m + np.swapaxes(m, 1, 2), P)
    assert np.all((v >= 0) & (v <= 1))
    assert np.allclose(np.linalg.norm(t, axis=-1), 1.0)


def test_sign_flip_of_eigenvectors():
    rng = np.random.default_rng(4)
    w = -np.sort(np.abs(rng.normal(size=(50, 3))), axis=1)[:, ::-1]
    v = np.stack([random_rotation(rng) for _ in range(50)])
    a, _ = frangi_from_eigen(w, v, P)
    b, _ = frangi_from_eigen(w, -v, P)
    assert np.array_equal(a, b)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 40.0))
def test_rotation_equivariance(seed, mag):
    rng = np.random.default_rng(seed)
    lam = np.array([rng.uniform(-0.05, 0.05), -rng.uniform(0.5, 1.0), -rng.uniform(1.2, 2.0)]) * mag
    h = np.diag(lam)
    r = random_rotation(rng)
    v0, t0 = frangi_response(h, P)
    v1, t1 = frangi_response(r @ h @ r.T, P)
    assert v1 == pytest.approx(v0, abs=1e-6)
    assert abs(abs(float(t1 @ (r @ t0))) - 1.0) < 1e-6


def test_scaling_bright_tube_is_monotone():
    h = np.diag([-0.1, -1.0, -1.5])
    vals = [frangi_response(c * h, P)[0] for c in (1.0, 2.0, 5.0, 20.0, 100.0)]
    assert np.all(np.diff(vals) >= 0)


def test_tie_break_is_deterministic():
    _, t = frangi_response(np.diag([-3.0, -3.0, -3.0]), P)
    _, t2 = frangi_response(np.diag([-3.0, -3.0, -3.0]), P)
    assert np.array_equal(t, t2)


# ------------------------------------------------------------- multiscale

@pytest.mark.parametrize("r", [1.5, 2.0, 3.0])
def test_scale_recovery_and_axis_peak(r):
    n = 36
    vol = tube_volume(r, n)
    fld = multiscale_frangi(vol, P)
    c = n // 2
    on_axis = fld.scales[c, c, 4:-4] / H
    assert np.mean((on_axis >= r / 1.5) & (on_axis <= 1.5 * r)) >= 0.9
    off = int(round(2 * r))
    assert np.all(fld.vesselness[c, c, :] > fld.vesselness[c + off, c, :])
    assert np.all(fld.vesselness[c, c, :] > fld.vesselness[c, c - off, :])


# -------------------------------------------------------------------- nms

def _field(v, t=None):
    v = np.asarray(v, dtype=float)
    if t is None:
        t = np.zeros(v.shape + (3,))
        t[..., 2] = 1.0
    return VesselnessField(v, t, np.full(v.shape, 0.05), H)


def test_isolated_voxel_retained():
    v = np.zeros((7, 7, 7))
    v[3, 3, 3] = 0.5
    pts = threshold_and_nms(_field(v), 0.1)
    assert len(pts) == 1
    assert np.allclose(pts.positions[0], np.array([3, 3, 3]) * H)


def test_all_below_threshold_empty():
    pts = threshold_and_nms(_field(np.full((6, 6, 6), 0.05)), 0.1)
    assert len(pts) == 0


def test_threshold_must_be_positive():
    with pytest.raises(ValueError):
        threshold_and_nms(_field(np.zeros((4, 4, 4))), 0.0)


def test_straight_tube_nms():
    n, r = 32, 2.0
    fld = multiscale_frangi(tube_volume(r, n), P)
    pts = threshold_and_nms(fld, 0.05)
    c = n // 2
    dist = np.hypot(pts.voxels[:, 0] - c, pts.voxels[:, 1] - c)
    assert np.all(dist <= 1.0)
    slices = set(pts.voxels[:, 2].tolist())
    assert slices == set(range(1, n - 1))


def test_nms_ordering_by_linear_index():
    rng = np.random.default_rng(0)
    v = rng.random((9, 8, 7))
    pts = threshold_and_nms(_field(v), 0.3)
    lin = pts.voxels[:, 0] + 9 * (pts.voxels[:, 1] + 8 * pts.voxels[:, 2])
    assert np.all(np.diff(lin) > 0)


def test_default_threshold_keeps_two_percent():
    v = np.random.default_rng(1).random((50, 50, 40))
    t = default_threshold(v)
    assert np.mean(v >= t) == pytest.approx(0.02, abs=1e-3)
    assert default_threshold(np.zeros((4, 4, 4))) == float("inf")


def test_points_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    pts = PointSet(rng.random((10, 3)), rng.normal(size=(10, 3)), rng.random(10), rng.random(10), H)
    write_points(pts, tmp_path / "p.txt")
    back = read_points(tmp_path / "p.txt", H)
    assert np.array_equal(back.positions, pts.positions)
    assert np.array_equal(back.tangents, pts.tangents)
    assert np.array_equal(back.scales, pts.scales)
    lines = (tmp_path / "p.txt").read_text().splitlines()
    assert len(lines[1].split()) == 8
