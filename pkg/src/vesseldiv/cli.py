"""Command line driver: synthesis, filtering, regularisation, tree extraction, scoring and plots.

Every stage reads and writes plain files under a fixed layout rooted at
``--out``::

    manifest_<command>.json
    s<seed>/tree.txt                                 ground truth
    s<seed>/n<noise>/volume.hdr, volume.raw
    s<seed>/n<noise>/points_t<thr>.txt               thresholded NMS points
    s<seed>/n<noise>/<method>/t<thr>/points.txt      refined points
    s<seed>/n<noise>/<method>/t<thr>/energy.csv, report.json
    s<seed>/n<noise>/<method>/t<thr>/tree.txt
    s<seed>/n<noise>/<method>/roc.csv, bif_roc.csv, angles_t<thr>.csv, metrics.json
    summary.csv                                      means over seeds
    plots/*.svg, plots/*.csv

``experiment`` runs the stage functions in order, so its files equal those
of the individual commands run with the same configuration.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import __version__
from .energy import DIVERGENCE_SENSES, EnergyParams
from .evaluation import (MatchParams, bifurcation_scores, match_and_score, resample_tree,
                         write_angle_csv, write_roc_csv)
from .field import DIVERGENCE_MODES, NEIGHBORHOOD_MODES
from .optimize import TangentSolverOptions
from .pipeline import METHODS, extract_tree, regularize
from .vesselness import FrangiParams, multiscale_frangi, read_points, threshold_and_nms, write_points
from .volume import (Forest, SynthesisParams, TreeFormatError, add_gaussian_noise, rasterize,
                     read_tree, read_volume, synthesize_tree, write_tree, write_volume)

SCHEMA_VERSION = 1
THREADS_ENV = "VESSELDIV_THREADS"
FALLOUT_NOTE = "fallout = 1 - matched reconstructed points / reconstructed points"


class ConfigError(ValueError):
    pass


_SYNTH_KEYS = ("depth", "branch_length", "bifurcation_angle", "radius_decay", "root_radius",
               "intensity_peak", "length_decay", "dims", "spacing", "margin", "max_attempts")
_FRANGI_KEYS = ("alpha", "beta", "gamma_f", "sigma_min", "sigma_max", "n_scales")
_ENERGY_KEYS = ("gamma", "lam", "tau", "divergence_sense", "hinge_sharpness")
_MATCH_KEYS = ("resample_step", "match_threshold_c", "bifurcation_threshold_c",
               "bifurcation_region", "direction_length")

_synth, _frangi, _energy, _match = SynthesisParams(), FrangiParams(), EnergyParams(), MatchParams()


@dataclass
class RunConfig:
    """Flat run configuration; serialised verbatim into the run manifest."""

    schema_version: int = SCHEMA_VERSION
    # synthesis
    depth: int = _synth.depth
    branch_length: list = field(default_factory=lambda: list(_synth.branch_length))
    bifurcation_angle: list = field(default_factory=lambda: list(_synth.bifurcation_angle))
    radius_decay: float = _synth.radius_decay
    root_radius: float = _synth.root_radius
    intensity_peak: float = _synth.intensity_peak
    length_decay: float = _synth.length_decay
    dims: list = field(default_factory=lambda: list(_synth.dims))
    spacing: float = _synth.spacing
    margin: float = _synth.margin
    max_attempts: int = _synth.max_attempts
    # vesselness
    alpha: float = _frangi.alpha
    beta: float = _frangi.beta
    gamma_f: float = _frangi.gamma_f
    sigma_min: float = _frangi.sigma_min
    sigma_max: float = _frangi.sigma_max
    n_scales: int = _frangi.n_scales
    # energy and solver
    gamma: float = _energy.gamma
    lam: float = _energy.lam
    tau: float = _energy.tau
    divergence_sense: str = _energy.divergence_sense
    hinge_sharpness: float = _energy.hinge_sharpness
    outer_iters: int = 20
    sign_iters: int = 1500
    tangent_iters: int = 1500
    # graphs
    neighborhood: str = "grid26"
    k: int = 6
    divergence_mode: str = "same"
    tree_k: int = 6
    # matching
    resample_step: float = _match.resample_step
    match_threshold_c: float = _match.match_threshold_c
    bifurcation_threshold_c: float = _match.bifurcation_threshold_c
    bifurcation_region: float = _match.bifurcation_region
    direction_length: float = _match.direction_length
    # sweep
    thresholds: list = field(default_factory=lambda: [0.5, 0.65, 0.8])
    noise_sigmas: list = field(default_factory=lambda: [10.0])
    seeds: list = field(default_factory=lambda: [0])
    methods: list = field(default_factory=lambda: list(METHODS))
    out: str = "runs"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if "schema_version" not in d:
            raise ConfigError("config lacks schema_version")
        if d["schema_version"] != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {d['schema_version']!r}; expected {SCHEMA_VERSION}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def synthesis(self, seed: int) -> SynthesisParams:
        kw = {k: getattr(self, k) for k in _SYNTH_KEYS}
        for k in ("branch_length", "bifurcation_angle", "dims"):
            kw[k] = tuple(kw[k])
        return SynthesisParams(seed=int(seed), **kw)

    def frangi(self) -> FrangiParams:
        return FrangiParams(**{k: getattr(self, k) for k in _FRANGI_KEYS})

    def energy(self) -> EnergyParams:
        return EnergyParams(length_scale=self.spacing, **{k: getattr(self, k) for k in _ENERGY_KEYS})

    def match(self) -> MatchParams:
        return MatchParams(voxel_size=self.spacing, **{k: getattr(self, k) for k in _MATCH_KEYS})

    def tangent_options(self) -> TangentSolverOptions:
        return TangentSolverOptions(max_iters=self.tangent_iters)

    def validate(self) -> None:
        """Check every module invariant before any work starts."""
        try:
            self.synthesis(0).validate()
            self.frangi().validate()
            self.energy().validate()
            self.match().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.neighborhood not in NEIGHBORHOOD_MODES:
            raise ConfigError(f"neighborhood must be one of {NEIGHBORHOOD_MODES}")
        if self.divergence_mode not in DIVERGENCE_MODES:
            raise ConfigError(f"divergence_mode must be one of {DIVERGENCE_MODES}")
        if self.divergence_sense not in DIVERGENCE_SENSES:
            raise ConfigError(f"divergence_sense must be one of {DIVERGENCE_SENSES}")
        for name in ("k", "tree_k", "outer_iters", "sign_iters", "tangent_iters"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.methods:
            raise ConfigError("method list is empty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; expected a subset of {list(METHODS)}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("duplicate methods")
        t = np.asarray(self.thresholds, dtype=float)
        if t.size == 0 or np.any(t <= 0) or np.any(np.diff(t) <= 0):
            raise ConfigError("thresholds must be positive and strictly increasing")
        if not self.noise_sigmas or any(float(s) < 0 for s in self.noise_sigmas):
            raise ConfigError("noise_sigmas must be a non-empty list of non-negative values")
        if not self.seeds or any(int(s) != s for s in self.seeds):
            raise ConfigError("seeds must be a non-empty list of integers")


# ---------------------------------------------------------------------------
# Layout
# ---------------------------------------------------------------------------

def _num(x: float) -> str:
    return f"{float(x):g}"


def seed_dir(cfg: RunConfig, seed) -> Path:
    return Path(cfg.out) / f"s{int(seed)}"


def noise_dir(cfg: RunConfig, seed, noise) -> Path:
    return seed_dir(cfg, seed) / f"n{_num(noise)}"


def cell_dir(cfg: RunConfig, seed, noise, method, threshold) -> Path:
    return noise_dir(cfg, seed, noise) / method / f"t{_num(threshold)}"


def _dump_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_manifest(cfg: RunConfig, command: str) -> Path:
    path = Path(cfg.out) / f"manifest_{command}.json"
    _dump_json({"command": command, "version": __version__, "config": asdict(cfg),
                "fallout_definition": FALLOUT_NOTE}, path)
    return path


def _warn(kind: str, **info) -> None:
    print(json.dumps({"warning": kind, **info}, sort_keys=True), file=sys.stderr)


def _read_tree_or_none(path: Path) -> Forest | None:
    """Reconstructed trees may be empty (header only)."""
    try:
        return read_tree(path, allow_forest=True)
    except TreeFormatError as exc:
        if "no nodes" in str(exc):
            return None
        raise


def _write_empty_tree(path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("# id parent x y z radius\n")


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def noise_seed(seed: int) -> int:
    # the same noise draw is scaled across noise levels
    return 1000 + int(seed)


def stage_generate(cfg: RunConfig, seed: int, noises) -> None:
    tree = synthesize_tree(cfg.synthesis(seed))
    write_tree(tree, seed_dir(cfg, seed) / "tree.txt")
    clean = rasterize(tree, tuple(cfg.dims), cfg.spacing, cfg.intensity_peak)
    for s in noises:
        write_volume(add_gaussian_noise(clean, float(s), seed=noise_seed(seed)),
                     noise_dir(cfg, seed, s) / "volume.hdr")


def stage_filter(cfg: RunConfig, seed: int, noise: float, volume_path=None, out_dir=None) -> list[Path]:
    vol_path = Path(volume_path) if volume_path else noise_dir(cfg, seed, noise) / "volume.hdr"
    if not vol_path.exists():
        raise FileNotFoundError(f"missing volume {vol_path}")
    fld = multiscale_frangi(read_volume(vol_path), cfg.frangi())
    target = Path(out_dir) if out_dir else noise_dir(cfg, seed, noise)
    written = []
    for t in cfg.thresholds:
        path = target / f"points_t{_num(t)}.txt"
        write_points(threshold_and_nms(fld, float(t)), path)
        written.append(path)
    return written


def reconstruct_points(cfg: RunConfig, points_path: Path, method: str, out_dir: Path) -> None:
    """Regularise one point file; writes refined points and, for regularised methods, the energy trace."""
    if not points_path.exists():
        raise FileNotFoundError(f"missing point set {points_path}")
    pts = read_points(points_path, cfg.spacing)
    out, report = regularize(pts, method, cfg.energy(), neighborhood=cfg.neighborhood, k=cfg.k,
                             divergence_mode=cfg.divergence_mode, outer_iters=cfg.outer_iters,
                             sign_iters=cfg.sign_iters, tangent_options=cfg.tangent_options())
    out_dir.mkdir(parents=True, exist_ok=True)
    write_points(out, out_dir / "points.txt", oriented=True, use_line_points=True)
    if report is not None:
        report.write_csv(out_dir / "energy.csv")
        report.write_json(out_dir / "report.json")
        if any(report.stagnation):
            _warn("stagnation", points=str(points_path), method=method,
                  iterations=[i for i, s in enumerate(report.stagnation) if s])


def stage_reconstruct(cfg: RunConfig, seed: int, noise: float, method: str) -> None:
    for t in cfg.thresholds:
        reconstruct_points(cfg, noise_dir(cfg, seed, noise) / f"points_t{_num(t)}.txt", method,
                           cell_dir(cfg, seed, noise, method, t))


def tree_from_points(cfg: RunConfig, points_path: Path, tree_path: Path) -> None:
    if not points_path.exists():
        raise FileNotFoundError(f"missing point set {points_path}")
    pts = read_points(points_path, cfg.spacing)
    forest = extract_tree(pts, k=cfg.tree_k)
    if forest is None:
        _write_empty_tree(tree_path)
    else:
        write_tree(forest, tree_path)


def stage_tree(cfg: RunConfig, seed: int, noise: float, method: str) -> None:
    for t in cfg.thresholds:
        d = cell_dir(cfg, seed, noise, method, t)
        tree_from_points(cfg, d / "points.txt", d / "tree.txt")


def score_trees(gt: Forest, trees, thresholds, params: MatchParams) -> dict:
    """ROC rows, bifurcation ROC rows and angle errors for one method."""
    gt_samples = resample_tree(gt, params.resample_step)
    roc, bif, angles, empty = [], [], {}, []
    for t, rec in zip(thresholds, trees):
        rt = None if rec is None else resample_tree(rec, params.resample_step)
        m = match_and_score(gt_samples, rt, params)
        b = bifurcation_scores(gt, rec, params)
        roc.append((float(t), m.recall, m.fallout))
        bif.append((float(t), b.recall, b.fallout))
        angles[float(t)] = b.angle_errors
        if m.empty_reconstruction:
            empty.append(float(t))
    return {"roc": roc, "bif_roc": bif, "angles": angles, "empty": empty}


def stage_eval(cfg: RunConfig, seed: int, noise: float, method: str) -> dict:
    gt_path = seed_dir(cfg, seed) / "tree.txt"
    if not gt_path.exists():
        raise FileNotFoundError(f"missing ground truth {gt_path}")
    gt = read_tree(gt_path)
    trees = []
    for t in cfg.thresholds:
        p = cell_dir(cfg, seed, noise, method, t) / "tree.txt"
        if not p.exists():
            raise FileNotFoundError(f"missing reconstruction {p}")
        trees.append(_read_tree_or_none(p))
    res = score_trees(gt, trees, cfg.thresholds, cfg.match())
    d = noise_dir(cfg, seed, noise) / method
    write_roc_csv(res["roc"], d / "roc.csv")
    write_roc_csv(res["bif_roc"], d / "bif_roc.csv")
    for t, errs in res["angles"].items():
        write_angle_csv(errs, d / f"angles_t{_num(t)}.csv")
    metrics = {
        "seed": int(seed), "noise": float(noise), "method": method,
        "fallout_definition": FALLOUT_NOTE,
        "empty_reconstruction_thresholds": res["empty"],
        "mean_angle_error": {_num(t): (float(np.mean([e for _, e in errs])) if errs else None)
                             for t, errs in res["angles"].items()},
        "unmatched_bifurcations": {_num(t): int(len(gt.bifurcations()) - len(errs))
                                   for t, errs in res["angles"].items()},
    }
    _dump_json(metrics, d / "metrics.json")
    return res


def run_cell(cfg: RunConfig, seed: int, noise: float) -> None:
    """All stages for one (volume, noise) cell; the ground truth must exist."""
    stage_filter(cfg, seed, noise)
    for m in cfg.methods:
        stage_reconstruct(cfg, seed, noise, m)
        stage_tree(cfg, seed, noise, m)
        stage_eval(cfg, seed, noise, m)


def _read_csv(path: Path) -> list[tuple]:
    lines = path.read_text().splitlines()[1:]
    return [tuple(float(x) for x in line.split(",")) for line in lines if line]


def write_summary(cfg: RunConfig) -> Path:
    """Per (noise, method, threshold) means over seeds."""
    rows = ["noise,method,threshold,recall,fallout,bif_recall,bif_fallout,angle_error_deg"]
    for s in cfg.noise_sigmas:
        for m in cfg.methods:
            roc, bif, ang = [], [], []
            for seed in cfg.seeds:
                d = noise_dir(cfg, seed, s) / m
                roc.append(_read_csv(d / "roc.csv"))
                bif.append(_read_csv(d / "bif_roc.csv"))
                ang.append([_read_csv(d / f"angles_t{_num(t)}.csv") for t in cfg.thresholds])
            for i, t in enumerate(cfg.thresholds):
                errs = [e for per_seed in ang for _, e in per_seed[i]]
                mean_err = repr(float(np.mean(errs))) if errs else "nan"
                vals = [np.mean([r[i][1] for r in roc]), np.mean([r[i][2] for r in roc]),
                        np.mean([b[i][1] for b in bif]), np.mean([b[i][2] for b in bif])]
                rows.append(f"{_num(s)},{m},{float(t)!r}," + ",".join(repr(float(v)) for v in vals)
                            + f",{mean_err}")
    path = Path(cfg.out) / "summary.csv"
    path.write_text("\n".join(rows) + "\n")
    return path


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------

_COLORS = {"nms": "#777777", "quacurv": "#1f77b4", "oriquacurv": "#d62728", "oriabscurv": "#2ca02c"}


def svg_line_chart(series: dict, title: str, xlabel: str, ylabel: str, csv_text: str,
                   width: int = 480, height: int = 360) -> str:
    """Self-contained SVG line chart; ``csv_text`` is embedded as a comment."""
    left, right, top, bottom = 60, 120, 30, 50
    pts = [p for xs in series.values() for p in xs if all(math.isfinite(v) for v in p)]
    xs = [p[0] for p in pts] or [0.0, 1.0]
    ys = [p[1] for p in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(0.0, min(ys)), max(ys)
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           "<!-- data\n" + csv_text.replace("--", "- -") + "-->",
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for i in range(5):
        xv = x0 + (x1 - x0) * i / 4
        yv = y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{sx(xv):.1f}" y="{top + ph + 16}" text-anchor="middle" font-size="10">{xv:.3g}</text>')
        out.append(f'<text x="{left - 6}" y="{sy(yv) + 3:.1f}" text-anchor="end" font-size="10">{yv:.3g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 14 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    for k, (name, xy) in enumerate(series.items()):
        color = _COLORS.get(name, "#000000")
        good = [p for p in xy if all(math.isfinite(v) for v in p)]
        if good:
            path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in good)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
            for x, y in good:
                out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="2.5" fill="{color}"/>')
        ly = top + 14 + 16 * k
        out.append(f'<line x1="{width - right + 10}" y1="{ly}" x2="{width - right + 30}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{width - right + 34}" y="{ly + 4}" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_summary(summary_path: Path, out_dir: Path) -> list[Path]:
    """ROC, bifurcation ROC and angle error charts per noise level."""
    lines = summary_path.read_text().splitlines()
    header = lines[0].split(",")
    rows = [dict(zip(header, line.split(","))) for line in lines[1:] if line]
    written = []
    charts = (("roc", "fallout", "recall", "Recall vs fall-out"),
              ("bif_roc", "bif_fallout", "bif_recall", "Bifurcation recall vs fall-out"),
              ("angle", "threshold", "angle_error_deg", "Bifurcation angle error"))
    for noise in sorted({r["noise"] for r in rows}, key=float):
        sub = [r for r in rows if r["noise"] == noise]
        methods = list(dict.fromkeys(r["method"] for r in sub))
        for name, xk, yk, title in charts:
            series = {m: [(float(r[xk]), float(r[yk])) for r in sub if r["method"] == m] for m in methods}
            csv_text = "method,threshold,x,y\n" + "".join(
                f"{r['method']},{r['threshold']},{r[xk]},{r[yk]}\n" for r in sub)
            stem = out_dir / f"{name}_n{noise}"
            out_dir.mkdir(parents=True, exist_ok=True)
            stem.with_suffix(".csv").write_text(csv_text)
            stem.with_suffix(".svg").write_text(
                svg_line_chart(series, f"{title} (noise {noise})", xk, yk, csv_text))
            written.append(stem.with_suffix(".svg"))
    return written


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def _cells(cfg):
    return [(int(seed), float(s)) for seed in cfg.seeds for s in cfg.noise_sigmas]


def _map_cells(func, cfg, cells):
    n = _threads()
    if n == 1 or len(cells) < 2:
        for c in cells:
            func(cfg, *c)
        return
    with ProcessPoolExecutor(max_workers=n) as pool:
        for f in [pool.submit(func, cfg, *c) for c in cells]:
            f.result()


def _generate_one(cfg, seed):
    stage_generate(cfg, seed, cfg.noise_sigmas)


def cmd_generate(cfg: RunConfig, args) -> None:
    for seed in cfg.seeds:
        _generate_one(cfg, int(seed))


def cmd_filter(cfg: RunConfig, args) -> None:
    if args.input:
        stage_filter(cfg, None, None, volume_path=args.input, out_dir=args.output or Path(args.input).parent)
        return
    _map_cells(stage_filter, cfg, _cells(cfg))


def cmd_reconstruct(cfg: RunConfig, args) -> None:
    if args.input:
        if len(cfg.methods) != 1:
            raise ConfigError("reconstruct --input needs a single --method")
        out = Path(args.output) if args.output else Path(args.input).parent / cfg.methods[0]
        reconstruct_points(cfg, Path(args.input), cfg.methods[0], out)
        return
    for seed, s in _cells(cfg):
        for m in cfg.methods:
            stage_reconstruct(cfg, seed, s, m)


def cmd_tree(cfg: RunConfig, args) -> None:
    if args.input:
        out = Path(args.output) if args.output else Path(args.input).with_name("tree.txt")
        tree_from_points(cfg, Path(args.input), out)
        return
    for seed, s in _cells(cfg):
        for m in cfg.methods:
            stage_tree(cfg, seed, s, m)


def cmd_eval(cfg: RunConfig, args) -> None:
    if args.gt:
        if not args.tree:
            raise ConfigError("eval --gt needs at least one --tree")
        gt = read_tree(args.gt)
        trees = [_read_tree_or_none(Path(p)) for p in args.tree]
        res = score_trees(gt, trees, list(range(len(trees))), cfg.match())
        report = [{"tree": str(p), "recall": r[1], "fallout": r[2], "bif_recall": b[1], "bif_fallout": b[2]}
                  for p, r, b in zip(args.tree, res["roc"], res["bif_roc"])]
        print(json.dumps(report, indent=2, sort_keys=True))
        return
    for seed, s in _cells(cfg):
        for m in cfg.methods:
            stage_eval(cfg, seed, s, m)
    write_summary(cfg)


def cmd_experiment(cfg: RunConfig, args) -> None:
    for seed in cfg.seeds:
        _generate_one(cfg, int(seed))
    _map_cells(run_cell, cfg, _cells(cfg))
    summary = write_summary(cfg)
    plot_summary(summary, Path(cfg.out) / "plots")


def cmd_plot(cfg: RunConfig, args) -> None:
    summary = Path(args.input) if args.input else Path(cfg.out) / "summary.csv"
    if not summary.exists():
        raise FileNotFoundError(f"missing metrics {summary}")
    plot_summary(summary, Path(args.output) if args.output else summary.parent / "plots")


COMMANDS = {
    "generate": cmd_generate,
    "filter": cmd_filter,
    "reconstruct": cmd_reconstruct,
    "tree": cmd_tree,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vesseldiv", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="flat JSON config with schema_version")
        p.add_argument("--seed", type=int, help="run a single seed")
        p.add_argument("--noise", type=float, help="run a single noise sigma")
        p.add_argument("--method", choices=METHODS, help="run a single method")
        p.add_argument("--out", help="output root directory")
        if name in ("filter", "reconstruct", "tree", "plot"):
            p.add_argument("--input", help="explicit input file instead of the run layout")
            p.add_argument("--output", help="explicit output location for --input")
        if name == "eval":
            p.add_argument("--gt", help="ground-truth tree file for ad hoc scoring")
            p.add_argument("--tree", action="append", help="reconstructed tree file (repeatable)")
    return parser


def load_config(args) -> RunConfig:
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        cfg = RunConfig.from_dict(data)
    else:
        cfg = RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.noise is not None:
        overrides["noise_sigmas"] = [args.noise]
    if args.method is not None:
        overrides["methods"] = [args.method]
    if args.out is not None:
        overrides["out"] = args.out
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        single_file = getattr(args, "input", None) is not None or getattr(args, "gt", None) is not None
        if args.out is not None or not single_file:
            write_manifest(cfg, args.command)
        COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command},
                         sort_keys=True), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
