import itertools
from dataclasses import replace

import numpy as np
import pytest

from vesseldiv.energy import EnergyParams, total_energy
from vesseldiv.field import NeighborGraph, build_neighborhood, pair_divergence
from vesseldiv.optimize import (
    _Model,
    block_coordinate_descent,
    build_sign_problem,
    retract,
    smoothed_objective,
    solve_signs,
    solve_tangents,
)
from vesseldiv.pipeline import method_params
from vesseldiv.trws import build_chains, labeling_energy, trws
from vesseldiv.vesselness import FrangiParams, PointSet, multiscale_frangi, threshold_and_nms
from vesseldiv.volume import CenterlineTree, add_gaussian_noise, rasterize

X = [1.0, 0.0, 0.0]
H = 0.046


def pair_graph(t_p, t_q, signs=(1, 1)):
    pts = PointSet(np.array([[0.0, 0, 0], [1.0, 0, 0]]), np.array([t_p, t_q], float), np.ones(2), np.ones(2),
                   signs=np.array(signs))
    return NeighborGraph(pts, [[0, 1]], [[0, 1]])


def brute_force(unary, edges, tables):
    n = len(unary)
    labs = np.array(list(itertools.product([0, 1], repeat=n)))
    e = unary[np.arange(n), labs].sum(axis=1)
    for k, (i, j) in enumerate(edges):
        e = e + tables[k][labs[:, i], labs[:, j]]
    return e.min(), labs[np.argmin(e)]


# --------------------------------------------------------------- sign tables

def test_collinear_table_matches_energy_at_four_combos():
    params = EnergyParams()
    g = pair_graph(X, X)
    prob = build_sign_problem(g, params)
    for a, sa in enumerate((-1, 1)):
        for b, sb in enumerate((-1, 1)):
            pts = g.points.copy()
            pts.signs = np.array([sa, sb])
            assert prob.tables[0, a, b] == pytest.approx(total_energy(g, params, pts).total, abs=1e-12)
    assert prob.tables[0, 0, 0] == prob.tables[0, 1, 1] == 0.0
    # (+1, -1) points the two tangents at each other: divergence -2
    assert prob.tables[0, 1, 0] == pytest.approx(params.gamma + 2 * params.lam)
    assert prob.tables[0, 0, 1] == pytest.approx(params.gamma)


def test_table_transpose_symmetry():
    g = pair_graph([1.0, 0.3, 0], [0.2, 1.0, 0.4])
    prob = build_sign_problem(g, EnergyParams())
    t = prob.table(0, 1)
    assert np.array_equal(prob.table(1, 0), t.T)
    with pytest.raises(KeyError):
        prob.table(0, 5)


def test_zero_lambda_antiparallel_degenerate():
    g = pair_graph(X, [-1.0, 0, 0])
    prob = build_sign_problem(g, replace(EnergyParams(), lam=0.0))
    # agreeing labels give dot -1 < tau; disagreeing ones give dot +1 and zero curvature
    t = prob.tables[0]
    assert t[0, 0] == t[1, 1]
    assert t[0, 1] == t[1, 0]


def test_zero_lambda_perpendicular_all_entries_saturated():
    g = pair_graph(X, [0.0, 1.0, 0])
    prob = build_sign_problem(g, replace(EnergyParams(), lam=0.0))
    assert np.all(prob.tables[0] == EnergyParams().gamma)


def test_data_terms_kept_out_of_tables():
    pts = PointSet(np.array([[0.0, 0, 0], [1.0, 0, 0]]), np.array([X, X]), np.ones(2), np.ones(2),
                   line_points=np.array([[0.0, 2.0, 0], [1.0, 2.0, 0]]))
    prob = build_sign_problem(NeighborGraph(pts, [[0, 1]], [[0, 1]]), EnergyParams())
    assert prob.constant == pytest.approx(8.0)
    assert prob.energy([1, 1]) == pytest.approx(8.0)


# --------------------------------------------------------------------- TRW-S

def test_three_node_chain_agreement():
    tables = np.array([[[0.0, 2.0], [2.0, 0.5]], [[0.1, 3.0], [3.0, 0.0]]])
    edges = np.array([[0, 1], [1, 2]])
    labels, e, lb, _, optimal = trws(np.zeros((3, 2)), edges, tables)
    best, lab = brute_force(np.zeros((3, 2)), edges, tables)
    assert e == pytest.approx(best, abs=1e-12)
    assert len(set(labels.tolist())) == 1
    assert e == pytest.approx(min(0.0 + 0.1, 0.5 + 0.0))
    assert optimal


def test_single_pair_unique_minimum():
    tables = np.array([[[3.0, 1.0], [-2.0, 0.5]]])
    labels, e, *_ = trws(np.zeros((2, 2)), np.array([[0, 1]]), tables)
    assert labels.tolist() == [1, 0]
    assert e == -2.0


def test_edges_must_be_ordered():
    with pytest.raises(ValueError):
        trws(np.zeros((2, 2)), np.array([[1, 0]]), np.zeros((1, 2, 2)))


def test_chains_cover_every_edge_once():
    rng = np.random.default_rng(0)
    edges = np.unique(np.sort(rng.integers(0, 10, size=(25, 2)), axis=1), axis=0)
    edges = edges[edges[:, 0] < edges[:, 1]]
    ptr, flat, start, isolated, n_at = build_chains(10, edges)
    assert sorted(flat.tolist()) == list(range(len(edges)))
    for c in range(len(ptr) - 1):
        chain = edges[flat[ptr[c]:ptr[c + 1]]]
        assert chain[0, 0] == start[c]
        assert np.all(chain[1:, 0] == chain[:-1, 1])


@pytest.mark.parametrize("seed", range(5))
def test_lower_bound_sound_on_loopy_graph(seed):
    rng = np.random.default_rng(seed)
    n = 10
    edges = np.unique(np.sort(np.vstack([[[i, (i + 1) % n] for i in range(n)],
                                         rng.integers(0, n, size=(8, 2))]), axis=1), axis=0)
    edges = edges[edges[:, 0] < edges[:, 1]]
    tables = rng.normal(size=(len(edges), 2, 2))
    unary = rng.normal(size=(n, 2))
    labels, e, bounds, energies, _ = trws(unary, edges, tables)
    assert e == pytest.approx(labeling_energy(labels, unary, edges, tables), abs=1e-12)
    samples = rng.integers(0, 2, size=(1000, n))
    assert all(labeling_energy(s, unary, edges, tables) >= bounds[-1] - 1e-9 for s in samples)
    assert np.all(np.diff(bounds) >= -1e-9)
    assert np.all(np.diff(energies) <= 1e-12)


def test_incumbent_kept_on_ties():
    tables = np.zeros((1, 2, 2))
    labels, *_ = trws(np.zeros((2, 2)), np.array([[0, 1]]), tables, init=np.array([1, 0]))
    assert labels.tolist() == [1, 0]


def test_solve_signs_reports_constant():
    g = pair_graph(X, X, signs=(1, -1))
    res = solve_signs(build_sign_problem(g, EnergyParams()), init=g.points.signs)
    assert res.energy == 0.0
    assert res.signs[0] == res.signs[1]
    assert res.energy >= res.lower_bound - 1e-12


# ------------------------------------------------------------- tangent step

def gradient_error(kind, seed):
    rng = np.random.default_rng(seed)
    n = 12
    vox = np.array([[i % 3, (i // 3) % 2, i // 6] for i in range(n)])
    pos = vox * H + rng.normal(scale=0.2 * H, size=(n, 3))
    pts = PointSet(pos, rng.normal(size=(n, 3)), np.ones(n), np.ones(n), H,
                   signs=rng.choice([-1, 1], n), voxels=vox)
    pts.line_points = pos + rng.normal(scale=0.3 * H, size=(n, 3))
    pts = retract(pts, np.zeros((n, 4)), H)
    g = build_neighborhood(pts, "grid26")
    params = EnergyParams(curvature_kind=kind, length_scale=H, tau=0.0)
    _, grad = smoothed_objective(g, params, pts)
    model = _Model(g, params, pts)
    fd = np.zeros(4 * n)
    eps = 1e-6
    for k in range(4 * n):
        d = np.zeros(4 * n)
        d[k] = eps
        fd[k] = (model.objective(retract(pts, d, H)) - model.objective(retract(pts, -d, H))) / (2 * eps)
    return np.linalg.norm(fd - grad.ravel()) / np.linalg.norm(grad)


@pytest.mark.parametrize("kind", ["quadratic", "absolute"])
def test_gradient_matches_finite_differences(kind):
    assert max(gradient_error(kind, s) for s in range(5)) < 1e-5


def test_collinear_points_need_no_steps():
    n = 5
    pos = np.column_stack([np.arange(n) * H, np.zeros(n), np.zeros(n)])
    pts = PointSet(pos, np.tile(X, (n, 1)), np.ones(n), np.ones(n), H)
    pairs = [[i, i + 1] for i in range(n - 1)]
    g = NeighborGraph(pts, pairs, pairs)
    res = solve_tangents(pts, g, EnergyParams(length_scale=H))
    assert res.accepted == 0
    assert res.energy_out == 0.0
    assert np.array_equal(res.points.tangents, pts.tangents)
    assert np.array_equal(res.points.line_points, pts.line_points)


def test_single_point_projects_onto_line():
    pts = PointSet(np.zeros((1, 3)), np.array([[0.3, 0.2, 1.0]]), np.ones(1), np.ones(1), H,
                   line_points=np.array([[0.5, -0.2, 0.1]]))
    g = NeighborGraph(pts, np.zeros((0, 2), int), np.zeros((0, 2), int))
    res = solve_tangents(pts, g, EnergyParams(length_scale=H))
    assert res.energy_out < 1e-12
    assert np.linalg.norm(res.points.line_points[0]) < 1e-6


def test_noisy_oblique_tube_line_points_approach_axis():
    n = 32
    u = np.array([0.35, 0.2, 1.0])
    u /= np.linalg.norm(u)
    mid = np.array([16.2, 15.7, 16.1]) * H
    a, b = mid - 25 * H * u, mid + 25 * H * u
    tree = CenterlineTree(np.array([a, b]), np.array([2 * H, 2 * H]), np.array([-1, 0]))
    vol = add_gaussian_noise(rasterize(tree, (n, n, n), H), 5.0, seed=0)
    pts = threshold_and_nms(multiscale_frangi(vol, FrangiParams()), 0.3)
    g = build_neighborhood(pts)

    def axis_distance(lp):
        d = lp - a
        return np.linalg.norm(d - np.outer(d @ u, u), axis=1).sum()

    res = solve_tangents(pts, g, method_params("quacurv", EnergyParams(length_scale=H)))
    assert res.energy_out <= res.energy_in + 1e-9
    assert axis_distance(res.points.line_points) <= 0.5 * axis_distance(pts.line_points)
    assert np.allclose(np.linalg.norm(res.points.tangents, axis=1), 1.0)


# --------------------------------------------------------------- outer loop

def y_points():
    d1 = np.array([np.sin(0.5), 0.0, np.cos(0.5)])
    d2 = np.array([-np.sin(0.6), 0.0, np.cos(0.6)])
    pos = [[0.0, 0.0, -float(k)] for k in (3, 2, 1)] + [k * d for d in (d1, d2) for k in (1, 2, 3)]
    tan = [[0.0, 0.0, 1.0]] * 3 + [d for d in (d1, d2) for _ in range(3)]
    rng = np.random.default_rng(0)
    tan = np.array(tan) * rng.choice([-1, 1], size=(9, 1))
    pts = PointSet(np.array(pos), tan, np.ones(9), np.ones(9))
    pairs = [[0, 1], [1, 2], [2, 3], [3, 4], [4, 5], [2, 6], [6, 7], [7, 8], [3, 6]]
    return NeighborGraph(pts, pairs, pairs)


def test_pure_projection_one_iteration():
    g = y_points()
    pts = g.points.copy()
    pts.line_points = pts.positions + 0.1
    g = g.with_points(pts)
    out, rep = block_coordinate_descent(g, replace(EnergyParams(), gamma=0.0, lam=0.0, curvature_kind="quadratic",
                                                   oriented=False))
    assert rep.outer_iterations == 1
    assert rep.energies[-1].total < 1e-12


def test_y_junction_signs_become_divergent():
    g = y_points()
    out, rep = block_coordinate_descent(g, EnergyParams(), outer_iters=5)
    divs = [pair_divergence(out[i], out[j]) for i, j in g.divergence_pairs]
    assert min(divs) >= -1e-9
    assert np.all(np.diff(rep.totals) <= 1e-9)
    assert rep.energies[-1].divergence == 0.0
