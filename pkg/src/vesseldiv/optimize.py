"""Block-coordinate descent on the joint energy.

The sign step builds a binary pairwise problem over ``N`` and ``D`` with
tangents frozen and minimises it with TRW-S. The tangent step runs
Levenberg-Marquardt on a smoothed least-squares version of the energy with
signs frozen. Both steps only ever hand back states whose true energy is no
higher than what they received, so the outer trace is monotone.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from numba import njit
from scipy.sparse.linalg import spsolve

from .energy import EnergyParams, _perp_norms, data_terms, total_energy
from .field import NeighborGraph
from .trws import labeling_energy, trws
from .vesselness import PointSet

__all__ = [
    "SignProblem",
    "build_sign_problem",
    "solve_signs",
    "TangentSolverOptions",
    "TangentResult",
    "solve_tangents",
    "smoothed_objective",
    "SolveReport",
    "block_coordinate_descent",
]

ABS_EPS = 1e-2  # smoothing of |P e| in the absolute-curvature residual


# ---------------------------------------------------------------- sign step

@dataclass
class SignProblem:
    """Binary problem over signs; label 0 is ``-1`` and label 1 is ``+1``.

    ``tables[e, a, b]`` is the cost of ``(x_i, x_j) = (a, b)`` for edge
    ``edges[e] = (i, j)`` with ``i < j``. ``constant`` holds the
    sign-independent data term.
    """

    n: int
    edges: np.ndarray
    tables: np.ndarray
    constant: float = 0.0

    def table(self, p: int, q: int) -> np.ndarray:
        """Cost table indexed ``[x_p, x_q]`` for either orientation of the pair."""
        i, j = min(p, q), max(p, q)
        hit = np.flatnonzero((self.edges[:, 0] == i) & (self.edges[:, 1] == j))
        if len(hit) == 0:
            raise KeyError((p, q))
        t = self.tables[hit[0]]
        return t if p < q else t.T

    def energy(self, signs) -> float:
        labels = (np.asarray(signs) > 0).astype(np.int64)
        return self.constant + float(labeling_energy(labels, np.zeros((self.n, 2)), self.edges, self.tables))


def _pair_costs(points: PointSet, pairs, in_n, in_d, params: EnergyParams, facet_area: float):
    """Costs of the four sign combinations per pair, shape ``(m, 2, 2)``."""
    m = len(pairs)
    tables = np.zeros((m, 2, 2))
    if m == 0:
        return tables
    i, j = pairs[:, 0], pairs[:, 1]
    t = points.tangents
    a, b = _perp_norms(points.line_points[i], t[i], points.line_points[j], t[j])
    kappa = 0.5 * (a + b) if params.curvature_kind == "absolute" else 0.5 * (a * a + b * b)
    dot = np.einsum("ij,ij->i", t[i], t[j])
    pq = points.positions[j] - points.positions[i]
    pq /= np.linalg.norm(pq, axis=1)[:, None]
    ai = np.einsum("ij,ij->i", t[i], pq) * facet_area
    aj = np.einsum("ij,ij->i", t[j], pq) * facet_area
    for la, xa in enumerate((-1.0, 1.0)):
        for lb, xb in enumerate((-1.0, 1.0)):
            if params.oriented:
                curv = np.where(xa * xb * dot >= params.tau, kappa, 1.0)
            else:
                curv = kappa
            cost = np.where(in_n, params.gamma * curv, 0.0)
            if params.lam > 0:
                div = xb * aj - xa * ai
                h = np.maximum(0.0, -div) if params.divergence_sense == "penalize_negative" else np.maximum(0.0, div)
                cost = cost + np.where(in_d, params.lam * h, 0.0)
            tables[:, la, lb] = cost
    return tables


def build_sign_problem(graph: NeighborGraph, params: EnergyParams, points: PointSet | None = None) -> SignProblem:
    """Pairwise sign costs over ``N`` union ``D`` with tangents and line points frozen."""
    pts = graph.points if points is None else points
    pairs, in_n, in_d = graph.union_pairs()
    tables = _pair_costs(pts, pairs, in_n, in_d, params, graph.facet_area)
    const = math.fsum(data_terms(pts, params.length_scale))
    return SignProblem(len(pts), pairs, tables, const)


@dataclass
class SignResult:
    signs: np.ndarray
    energy: float
    lower_bound: float
    bound_trace: np.ndarray
    iterations: int
    optimal: bool


def solve_signs(problem: SignProblem, max_iters: int = 1500, init=None) -> SignResult:
    """TRW-S over the sign problem.

    ``init`` (signs in ``{-1, +1}``) is the incumbent and is kept unless a
    strictly better labelling is found. Energies include ``problem.constant``.
    """
    labels0 = None if init is None else (np.asarray(init) > 0).astype(np.int64)
    if labels0 is None:
        labels0 = np.ones(problem.n, dtype=np.int64)
    labels, e, bounds, _, optimal = trws(np.zeros((problem.n, 2)), problem.edges, problem.tables,
                                         init=labels0, max_iters=max_iters)
    signs = np.where(labels == 1, 1, -1).astype(np.int64)
    lb = float(bounds[-1]) if len(bounds) else float(e)
    return SignResult(signs, float(e) + problem.constant, lb + problem.constant,
                      np.asarray(bounds) + problem.constant, len(bounds), bool(optimal))


# ------------------------------------------------------------- tangent step

@dataclass
class TangentSolverOptions:
    max_iters: int = 1500
    damping_init: float = 1e-3
    damping_cap: float = 1e10
    ftol: float = 1e-7
    gtol: float = 1e-10
    # stop when ``window`` accepted steps together gain less than ``window_tol`` (relative)
    window: int = 10
    window_tol: float = 1e-6


@dataclass
class TangentResult:
    points: PointSet
    energy_in: float
    energy_out: float
    accepted: int
    rejected: int
    stagnated: bool
    iterations: int


def _basis(t):
    helper = np.zeros_like(t)
    helper[np.arange(len(t)), np.argmin(np.abs(t), axis=1)] = 1.0
    u = np.cross(t, helper)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return u, np.cross(t, u)


@njit(cache=True)
def _dot3(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


@njit(cache=True)
def _assemble(pos, lp, t, u, w, signs, ell, cpairs, c_coef, kind_abs, abs_eps,
              dpairs, g, lam, beta, sense_neg, want_jac):
    """Residual vector and Jacobian triplets for the smoothed objective.

    Columns per point: ``(a, b, th1, th2)``; ``a, b`` move the line by
    ``ell * (a u + b w)``, ``th`` tilt the tangent towards ``u, w``.
    """
    n = len(pos)
    nc = len(cpairs)
    nd = len(dpairs)
    per_c = 2 if (kind_abs and not want_jac) else 6
    nres = 3 * n + per_c * nc + nd
    r = np.zeros(nres)
    cap = (12 * n + per_c * 8 * nc + 4 * nd) if want_jac else 0
    rows = np.empty(cap, dtype=np.int64)
    cols = np.empty(cap, dtype=np.int64)
    vals = np.empty(cap)
    k = 0
    # df/d(a, b, th1, th2) per point (3 x 4) and dt (3 x 4)
    F = np.zeros((n, 3, 4))
    T = np.zeros((n, 3, 4))
    for p in range(n):
        vu = _dot3(pos[p] - lp[p], u[p])
        vw = _dot3(pos[p] - lp[p], w[p])
        for c in range(3):
            F[p, c, 0] = ell * u[p, c]
            F[p, c, 1] = ell * w[p, c]
            F[p, c, 2] = t[p, c] * vu
            F[p, c, 3] = t[p, c] * vw
            T[p, c, 2] = u[p, c]
            T[p, c, 3] = w[p, c]
    row = 0
    for p in range(n):
        for c in range(3):
            r[row + c] = (pos[p, c] - lp[p, c]) / ell
            if want_jac:
                for q in range(4):
                    rows[k] = row + c
                    cols[k] = 4 * p + q
                    vals[k] = -F[p, c, q] / ell
                    k += 1
        row += 3
    e = np.empty(3)
    Q = np.empty((3, 3))
    dy_i = np.empty((3, 4))
    dy_j = np.empty((3, 4))
    y = np.empty(3)
    dei = np.empty(3)
    dej = np.empty(3)
    for m in range(nc):
        i = cpairs[m, 0]
        j = cpairs[m, 1]
        D = 0.0
        for c in range(3):
            e[c] = lp[i, c] - lp[j, c]
            D += e[c] * e[c]
        D = np.sqrt(D)
        for c in range(3):
            e[c] /= D
        for a in range(3):
            for b in range(3):
                Q[a, b] = ((1.0 if a == b else 0.0) - e[a] * e[b]) / D
        # two residual vectors: y = P_{t_s} e for s = j (first) and s = i (second)
        for half in range(2):
            s = j if half == 0 else i
            ts = t[s]
            te = _dot3(ts, e)
            for c in range(3):
                y[c] = e[c] - te * ts[c]
            if want_jac:
                # de = Q (dF_i - dF_j); dy = P_s de - t_s (e . dt_s) - (t_s . e) dt_s
                for q in range(4):
                    for a in range(3):
                        acc_i = 0.0
                        acc_j = 0.0
                        for b in range(3):
                            acc_i += Q[a, b] * F[i, b, q]
                            acc_j -= Q[a, b] * F[j, b, q]
                        dei[a] = acc_i
                        dej[a] = acc_j
                    pi = _dot3(ts, dei)
                    pj = _dot3(ts, dej)
                    for a in range(3):
                        dy_i[a, q] = dei[a] - pi * ts[a]
                        dy_j[a, q] = dej[a] - pj * ts[a]
                    etd = 0.0
                    for a in range(3):
                        etd += e[a] * T[s, a, q]
                    for a in range(3):
                        extra = -ts[a] * etd - te * T[s, a, q]
                        if half == 0:
                            dy_j[a, q] += extra
                        else:
                            dy_i[a, q] += extra
            if kind_abs and not want_jac:
                x = _dot3(y, y)
                r[row] = c_coef * (x + abs_eps * abs_eps) ** 0.25
                row += 1
            else:
                # absolute kind is linearised through its quadratic majoriser
                # c^2 |y|^2 / (2 sqrt(x0 + eps^2)), whose gradient matches at x0
                coef = c_coef
                if kind_abs:
                    coef = c_coef / np.sqrt(2.0 * np.sqrt(_dot3(y, y) + abs_eps * abs_eps))
                for a in range(3):
                    r[row + a] = coef * y[a]
                    if want_jac:
                        for q in range(4):
                            rows[k] = row + a
                            cols[k] = 4 * i + q
                            vals[k] = coef * dy_i[a, q]
                            k += 1
                            rows[k] = row + a
                            cols[k] = 4 * j + q
                            vals[k] = coef * dy_j[a, q]
                            k += 1
                row += 3
    sq_lam = np.sqrt(lam)
    for m in range(nd):
        i = dpairs[m, 0]
        j = dpairs[m, 1]
        div = signs[j] * _dot3(t[j], g[m]) - signs[i] * _dot3(t[i], g[m])
        z = -beta * div if sense_neg else beta * div
        # softplus(z) / beta and its derivative with respect to div
        sp_val = np.logaddexp(0.0, z) / beta
        sig = np.exp(-np.logaddexp(0.0, -z))
        ds = -sig if sense_neg else sig
        r[row] = sq_lam * np.sqrt(sp_val)
        if want_jac:
            fac = 0.0 if sp_val <= 1e-300 else sq_lam * ds / (2.0 * np.sqrt(sp_val))
            for q in range(2, 4):
                rows[k] = row
                cols[k] = 4 * i + q
                vals[k] = -fac * signs[i] * _dot3(g[m], T[i, :, q])
                k += 1
                rows[k] = row
                cols[k] = 4 * j + q
                vals[k] = fac * signs[j] * _dot3(g[m], T[j, :, q])
                k += 1
        row += 1
    return r, rows[:k], cols[:k], vals[:k]


class _Model:
    """Smoothed objective with a frozen active set around a reference state."""

    def __init__(self, graph: NeighborGraph, params: EnergyParams, points: PointSet):
        self.graph = graph
        self.params = params
        pairs = graph.curvature_pairs
        if params.oriented and len(pairs):
            i, j = pairs[:, 0], pairs[:, 1]
            dot = points.signs[i] * points.signs[j] * np.einsum("ij,ij->i", points.tangents[i], points.tangents[j])
            active = dot >= params.tau
        else:
            active = np.ones(len(pairs), dtype=bool)
        self.active_pairs = np.ascontiguousarray(pairs[active]) if len(pairs) else np.zeros((0, 2), np.int64)
        self.saturated = float(params.gamma * np.count_nonzero(~active))
        d = graph.divergence_pairs if params.lam > 0 else np.zeros((0, 2), np.int64)
        self.dpairs = np.ascontiguousarray(d, dtype=np.int64)
        if len(d):
            pq = points.positions[d[:, 1]] - points.positions[d[:, 0]]
            self.g = pq / np.linalg.norm(pq, axis=1)[:, None] * graph.facet_area
        else:
            self.g = np.zeros((0, 3))
        self.c_coef = math.sqrt(params.gamma / 2.0)
        self.n = len(points)

    def residuals(self, pts: PointSet, jac: bool):
        u, w = _basis(pts.tangents)
        p = self.params
        r, rows, cols, vals = _assemble(
            pts.positions, pts.line_points, pts.tangents, u, w, pts.signs.astype(float),
            p.length_scale, self.active_pairs, self.c_coef, p.curvature_kind == "absolute", ABS_EPS,
            self.dpairs, self.g, p.lam, p.hinge_sharpness, p.divergence_sense == "penalize_negative", jac)
        J = sp.csr_matrix((vals, (rows, cols)), shape=(len(r), 4 * self.n)) if jac else None
        return r, J

    def objective(self, pts: PointSet) -> float:
        r, _ = self.residuals(pts, False)
        return math.fsum(r * r) + self.saturated


def retract(pts: PointSet, delta: np.ndarray, length_scale: float) -> PointSet:
    """Apply local parameters ``delta`` (n, 4) and re-project line points onto the raw positions."""
    u, w = _basis(pts.tangents)
    d = np.asarray(delta, dtype=float).reshape(-1, 4)
    t = pts.tangents + d[:, 2:3] * u + d[:, 3:4] * w
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    c = pts.line_points + length_scale * (d[:, 0:1] * u + d[:, 1:2] * w)
    foot = c + np.einsum("ij,ij->i", pts.positions - c, t)[:, None] * t
    return PointSet(pts.positions, t, pts.scales, pts.vesselness, pts.spacing,
                    pts.signs, foot, pts.voxels)


def project_line_points(pts: PointSet) -> PointSet:
    """Move each line point to the foot of its raw position on the line."""
    lp = pts.line_points
    t = pts.tangents
    foot = lp + np.einsum("ij,ij->i", pts.positions - lp, t)[:, None] * t
    return PointSet(pts.positions, t, pts.scales, pts.vesselness, pts.spacing,
                    pts.signs, foot, pts.voxels)


def smoothed_objective(graph: NeighborGraph, params: EnergyParams, points: PointSet,
                       reference: PointSet | None = None):
    """``(value, gradient)`` of the smoothed objective in local parameters at ``points``.

    The active curvature set is frozen at ``reference`` (default ``points``).
    The gradient is with respect to the ``(n, 4)`` parameters of :func:`retract`.
    """
    model = _Model(graph, params, points if reference is None else reference)
    r, J = model.residuals(points, True)
    return model.objective(points), (2.0 * (J.T @ r)).reshape(-1, 4)


def solve_tangents(points: PointSet, graph: NeighborGraph, params: EnergyParams,
                   options: TangentSolverOptions | None = None) -> TangentResult:
    """Levenberg-Marquardt on the line parameters with signs frozen.

    Steps are accepted when they strictly lower the smoothed objective. The
    returned state is the one with the lowest true energy seen, so the
    energy never rises across a call.
    """
    opt = options or TangentSolverOptions()
    ell = params.length_scale
    cur = project_line_points(points)
    e_in = total_energy(graph, params, points).total
    best, best_e = points, e_in
    e_cur_true = total_energy(graph, params, cur).total
    if e_cur_true < best_e:
        best, best_e = cur, e_cur_true
    model = _Model(graph, params, cur)
    r, J = model.residuals(cur, True)
    f_cur = model.objective(cur)
    mu = opt.damping_init
    accepted = rejected = it = 0
    stagnated = False
    history = [f_cur]
    n4 = 4 * len(cur)
    eye = sp.identity(n4, format="csc")
    while it < opt.max_iters and n4 > 0:
        it += 1
        grad = J.T @ r
        if np.max(np.abs(grad), initial=0.0) <= opt.gtol:
            break
        A = (J.T @ J).tocsc()
        step = None
        while mu <= opt.damping_cap:
            delta = -spsolve(A + mu * eye, grad)
            cand = retract(cur, delta, ell)
            try:
                f_new = model.objective(cand)
            except ZeroDivisionError:
                # the step made two line points coincide; curvature is undefined there
                f_new = math.inf
            if f_new < f_cur:
                step = delta
                break
            rejected += 1
            mu *= 10.0
        if step is None:
            stagnated = True
            break
        accepted += 1
        mu = max(mu / 10.0, 1e-15)
        decrease = f_cur - f_new
        cur, f_cur = cand, f_new
        e_true = total_energy(graph, params, cur).total
        if e_true < best_e:
            best, best_e = cur, e_true
        r, J = model.residuals(cur, True)
        history.append(f_cur)
        if decrease <= opt.ftol * max(f_cur, 1e-300) or np.max(np.abs(step)) <= 1e-14:
            break
        if len(history) > opt.window and history[-1 - opt.window] - f_cur <= opt.window_tol * f_cur:
            break
    return TangentResult(best, e_in, best_e, accepted, rejected, stagnated, it)


# ------------------------------------------------------------- outer loop

@dataclass
class SolveReport:
    """Outer-loop record; ``energies[0]`` is the initial state."""

    energies: list = field(default_factory=list)
    lower_bounds: list = field(default_factory=list)
    sign_iterations: list = field(default_factory=list)
    accepted_steps: int = 0
    rejected_steps: int = 0
    stagnation: list = field(default_factory=list)
    converged: bool = False
    outer_iterations: int = 0
    wall_time: float = 0.0

    @property
    def totals(self) -> np.ndarray:
        return np.array([e.total for e in self.energies])

    def write_csv(self, path) -> None:
        lines = ["iter,data,curvature,divergence,total"]
        for k, e in enumerate(self.energies):
            lines.append(f"{k},{float(e.data)!r},{float(e.curvature)!r},{float(e.divergence)!r},{float(e.total)!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    def summary(self, include_timing: bool = False) -> dict:
        out = {
            "outer_iterations": self.outer_iterations,
            "converged": self.converged,
            "final_energy": self.energies[-1].total if self.energies else None,
            "lower_bounds": self.lower_bounds,
            "sign_iterations": self.sign_iterations,
            "accepted_steps": self.accepted_steps,
            "rejected_steps": self.rejected_steps,
            "stagnation": self.stagnation,
        }
        if include_timing:
            out["wall_time"] = self.wall_time
        return out

    def write_json(self, path, include_timing: bool = False) -> None:
        Path(path).write_text(json.dumps(self.summary(include_timing), indent=2, sort_keys=True) + "\n")


def block_coordinate_descent(graph: NeighborGraph, params: EnergyParams, outer_iters: int = 20,
                             rel_tol: float = 1e-6, sign_iters: int = 1500,
                             abs_tol: float = 1e-12,
                             tangent_options: TangentSolverOptions | None = None,
                             init_signs=None):
    """Alternate sign and tangent steps until the relative decrease drops below ``rel_tol``.

    The energy is non-negative, so the loop also stops once it falls to
    ``abs_tol``.

    Sign steps are skipped when the energy does not depend on signs
    (unoriented curvature and ``lam == 0``).
    """
    params.validate()
    t0 = time.perf_counter()
    pts = graph.points.copy()
    if init_signs is not None:
        pts.signs = np.asarray(init_signs, dtype=np.int64).copy()
    report = SolveReport()
    report.energies.append(total_energy(graph, params, pts))
    uses_signs = params.oriented or params.lam > 0
    for _ in range(outer_iters):
        prev = report.energies[-1].total
        if uses_signs:
            problem = build_sign_problem(graph, params, pts)
            res = solve_signs(problem, sign_iters, init=pts.signs)
            pts = PointSet(pts.positions, pts.tangents, pts.scales, pts.vesselness, pts.spacing,
                           res.signs, pts.line_points, pts.voxels)
            report.lower_bounds.append(res.lower_bound)
            report.sign_iterations.append(res.iterations)
        tres = solve_tangents(pts, graph, params, tangent_options)
        pts = tres.points
        report.accepted_steps += tres.accepted
        report.rejected_steps += tres.rejected
        report.stagnation.append(tres.stagnated)
        report.energies.append(total_energy(graph, params, pts))
        report.outer_iterations += 1
        cur = report.energies[-1].total
        if cur <= abs_tol or prev - cur <= rel_tol * max(abs(prev), 1e-300):
            report.converged = True
            break
    report.wall_time = time.perf_counter() - t0
    return pts, report
