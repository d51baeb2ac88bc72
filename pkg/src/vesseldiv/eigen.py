"""Batched eigen-decomposition of real symmetric 3x3 matrices.

Eigenvalues come from the trigonometric (Cardano/Smith) closed form and
eigenvectors from cross products of rows of ``A - lambda I``. Matrices whose
spectrum is (nearly) degenerate, where the cross products lose all accuracy,
are re-solved with cyclic Jacobi rotations (:func:`jacobi3`).
"""

from __future__ import annotations

import numpy as np

__all__ = ["eigh3", "jacobi3"]

DEGENERATE_GAP = 1e-10


def jacobi3(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 30):
    """Cyclic Jacobi iterations for symmetric matrices of shape ``(n, 3, 3)``.

    Returns eigenvalues in ascending order and the matching eigenvectors as
    columns. All matrices are rotated in lockstep; converged ones receive
    identity rotations.
    """
    a = np.array(a, dtype=float).reshape(-1, 3, 3)
    n = len(a)
    v = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    scale = np.maximum(np.abs(a).max(axis=(1, 2)), 1e-300)
    idx = np.arange(n)
    for _ in range(max_sweeps):
        off = a[:, 0, 1] ** 2 + a[:, 0, 2] ** 2 + a[:, 1, 2] ** 2
        if np.all(off <= (tol * scale) ** 2):
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[:, p, q]
            active = np.abs(apq) > tol * scale * 1e-3
            safe = np.where(active, apq, 1.0)
            theta = (a[:, q, q] - a[:, p, p]) / (2.0 * safe)
            t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rot = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
            rot[idx, p, p] = c
            rot[idx, q, q] = c
            rot[idx, p, q] = s
            rot[idx, q, p] = -s
            a = np.einsum("nji,njk,nkl->nil", rot, a, rot)
            v = np.einsum("nij,njk->nik", v, rot)
    w = np.diagonal(a, axis1=1, axis2=2).copy()
    order = np.argsort(w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    return w, v


def _eigenvalues(a):
    a00, a11, a22 = a[:, 0, 0], a[:, 1, 1], a[:, 2, 2]
    a01, a02, a12 = a[:, 0, 1], a[:, 0, 2], a[:, 1, 2]
    p1 = a01 * a01 + a02 * a02 + a12 * a12
    q = (a00 + a11 + a22) / 3.0
    b00, b11, b22 = a00 - q, a11 - q, a22 - q
    p2 = b00 * b00 + b11 * b11 + b22 * b22 + 2.0 * p1
    p = np.sqrt(p2 / 6.0)
    safe = np.where(p > 0, p, 1.0)
    det = (
        b00 * (b11 * b22 - a12 * a12)
        - a01 * (a01 * b22 - a12 * a02)
        + a02 * (a01 * a12 - b11 * a02)
    )
    r = np.clip(det / (2.0 * safe**3), -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    hi = q + 2.0 * p * np.cos(phi)
    lo = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    mid = 3.0 * q - hi - lo
    return np.stack([lo, mid, hi], axis=1), p, 1.0 - r * r


def _null_vector(a, lam):
    """Unit vector spanning the null space of ``a - lam I`` (rank-2 case)."""
    m = a - lam[:, None, None] * np.eye(3)
    r0, r1, r2 = m[:, 0], m[:, 1], m[:, 2]
    cands = np.stack([np.cross(r0, r1), np.cross(r0, r2), np.cross(r1, r2)], axis=1)
    norms = np.linalg.norm(cands, axis=2)
    best = np.argmax(norms, axis=1)
    idx = np.arange(len(a))
    v = cands[idx, best]
    n = norms[idx, best]
    return v / np.where(n > 0, n, 1.0)[:, None], n


def eigh3(a: np.ndarray):
    """Eigen-decomposition of symmetric matrices of shape ``(..., 3, 3)``.

    Returns ``(w, v)`` with eigenvalues ``w[..., k]`` ascending and unit
    eigenvectors in columns ``v[..., :, k]``, mirroring ``numpy.linalg.eigh``.
    """
    a = np.asarray(a, dtype=float)
    shape = a.shape[:-2]
    a = a.reshape(-1, 3, 3)
    # normalise so the cubic in the closed form cannot under- or overflow
    scale = np.abs(a).max(axis=(1, 2))
    scale = np.where(scale > 0, scale, 1.0)
    a = a / scale[:, None, None]
    w, p, disc = _eigenvalues(a)
    v = np.empty_like(a)
    # near a double root the closed form carries ~sqrt(eps) error, so the
    # test is on the normalised discriminant rather than the computed gap
    degenerate = (p == 0) | (disc < DEGENERATE_GAP)
    ok = ~degenerate
    if ok.any():
        sub = a[ok]
        v0, _ = _null_vector(sub, w[ok, 0])
        v2, _ = _null_vector(sub, w[ok, 2])
        # make the top vector exactly orthogonal to the bottom one
        v2 = v2 - (v2 * v0).sum(axis=1, keepdims=True) * v0
        v2 /= np.linalg.norm(v2, axis=1, keepdims=True)
        v1 = np.cross(v2, v0)
        v[ok] = np.stack([v0, v1, v2], axis=2)
    if degenerate.any():
        w[degenerate], v[degenerate] = jacobi3(a[degenerate])
    w = w * scale[:, None]
    return w.reshape(shape + (3,)), v.reshape(shape + (3, 3))
