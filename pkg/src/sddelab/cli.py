"""Experiment runner: config in, reports, series, figures and manifest out.

One config file describes one run.  The file is a YAML/JSON mapping with
a mandatory ``kind`` key matching the subcommand; unknown keys anywhere
in the tree are validation errors, because a silently ignored parameter
would make a bound check meaningless.  Validation always happens before
any compute; ``validate`` stops there and prints the violation list.

Outputs land in ``<out>/<kind>-<hash12>/`` where the hash covers the
effective config (seed override included, thread count excluded):
``report.json``, ``series.csv`` (columns time, statistic, value,
std_error), ``plot_*.txt`` two-column series, ``fig_*.png`` figures and
``manifest.json``.  Reruns of an identical config are byte-identical in
every CSV, text and JSON result file; wall time lives only in the
manifest.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from typing import Callable, Optional

import numpy as np
import yaml

from . import __version__
from . import estimates as est
from . import zvonkin as zv
from .coefficients import CoefficientSet, make_coefficients
from .core import GridAlignmentError, McEstimate, TimeGrid, validate_pq
from .engine import CoupledPathEnsemble, PathEnsemble, SimulationConfig
from .plots import line_figure
from .reporting import (RunManifest, canonical_config_hash, fmt17, write_csv,
                        write_json, write_plot_data)

ENV_THREADS = "SDDELAB_THREADS"

KINDS = ("simulate", "verify-bound", "stability", "zvonkin", "maximal",
         "gronwall", "krylov")


class ConfigError(Exception):
    pass


class _Reader:
    """Mapping walker that records violations and consumed keys."""

    def __init__(self, data, path: str, violations: list[str]):
        self.violations = violations
        self.path = path
        self.seen: set[str] = set()
        if isinstance(data, dict):
            self.data = data
        else:
            self.data = {}
            if data is not None:
                violations.append(f"{path or 'config'}: expected a mapping")

    def _full(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def has(self, key: str) -> bool:
        return key in self.data

    def get(self, key: str, required: bool = True, default=None):
        self.seen.add(key)
        if key in self.data:
            return self.data[key]
        if required:
            self.violations.append(f"missing key: {self._full(key)}")
        return default

    def number(self, key: str, required: bool = True, default=None):
        v = self.get(key, required, default)
        if v is None:
            return default
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.violations.append(f"{self._full(key)}: expected a number")
            return default
        return float(v)

    def integer(self, key: str, required: bool = True, default=None):
        v = self.get(key, required, default)
        if v is None:
            return default
        if isinstance(v, bool) or not isinstance(v, int):
            self.violations.append(f"{self._full(key)}: expected an integer")
            return default
        return int(v)

    def boolean(self, key: str, default: bool) -> bool:
        v = self.get(key, required=False, default=default)
        if not isinstance(v, bool):
            self.violations.append(f"{self._full(key)}: expected true/false")
            return default
        return v

    def string(self, key: str, required: bool = True, default=None):
        v = self.get(key, required, default)
        if v is None:
            return default
        if not isinstance(v, str):
            self.violations.append(f"{self._full(key)}: expected a string")
            return default
        return v

    def child(self, key: str, required: bool = True) -> "_Reader":
        v = self.get(key, required, default={} if required else None)
        return _Reader(v if v is not None else {}, self._full(key), self.violations)

    def finish(self) -> None:
        for k in self.data:
            if k not in self.seen:
                self.violations.append(f"unknown key: {self._full(k)}")


def _read_grid(r: _Reader) -> Optional[TimeGrid]:
    g = r.child("grid")
    d = g.integer("d")
    delay = g.number("r")
    horizon = g.number("T")
    h = g.number("h")
    g.finish()
    if None in (d, delay, horizon, h):
        return None
    try:
        return TimeGrid(d=d, r=delay, T=horizon, h=h)
    except (GridAlignmentError, ValueError) as exc:
        r.violations.append(f"grid: {exc}")
        return None


def _coeff_entry(c: _Reader, key: str, default_id: str):
    raw = c.get(key, required=False, default=default_id)
    if isinstance(raw, str):
        return (raw, {})
    if isinstance(raw, dict):
        if "id" not in raw:
            c.violations.append(f"{c._full(key)}: needs an 'id' field")
            return None
        return (raw["id"], {k: v for k, v in raw.items() if k != "id"})
    c.violations.append(f"{c._full(key)}: expected id string or mapping")
    return None


def _read_coefficients(r: _Reader, d: Optional[int]) -> Optional[CoefficientSet]:
    c = r.child("coefficients")
    drift = _coeff_entry(c, "drift", "zero")
    diffusion = _coeff_entry(c, "diffusion", "identity")
    functional = _coeff_entry(c, "functional", "none")
    c.finish()
    if d is None or None in (drift, diffusion, functional):
        return None
    try:
        return make_coefficients(d, drift=drift, diffusion=diffusion,
                                 functional=functional)
    except (KeyError, TypeError, ValueError) as exc:
        r.violations.append(f"coefficients: {exc}")
        return None


def _read_segment(r: _Reader, key: str, grid: Optional[TimeGrid]):
    raw = r.get(key, required=True)
    if raw is None or grid is None:
        return None
    arr = np.asarray(raw, float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim == 1 and arr.size != grid.d:
        r.violations.append(
            f"{key}: expected {grid.d} components or a (m+1, d) table")
        return None
    if arr.ndim == 2 and arr.shape != (grid.m + 1, grid.d):
        r.violations.append(
            f"{key}: full history must have shape {(grid.m + 1, grid.d)}")
        return None
    if arr.ndim > 2:
        r.violations.append(f"{key}: too many dimensions")
        return None
    return arr


def _read_mc(r: _Reader):
    mc = r.child("mc")
    n_paths = mc.integer("n_paths")
    seed = mc.integer("master_seed")
    conf = mc.number("confidence_level", required=False, default=0.99)
    chunk = mc.integer("chunk_size", required=False, default=4096)
    mc.finish()
    if conf is not None and not 0.0 < conf < 1.0:
        r.violations.append("mc.confidence_level: must lie in (0, 1)")
    if n_paths is not None and n_paths < 1:
        r.violations.append("mc.n_paths: must be >= 1")
    if seed is not None and not 0 <= seed < 2 ** 64:
        r.violations.append("mc.master_seed: must fit an unsigned 64-bit integer")
    return n_paths, seed, conf, chunk


# ---------------------------------------------------------------------------
# per-kind preparation (validation without compute)


def _prep_simulate(root: _Reader) -> dict:
    grid = _read_grid(root)
    coeffs = _read_coefficients(root, grid.d if grid else None)
    segment = _read_segment(root, "initial_segment", grid)
    n_paths, seed, conf, chunk = _read_mc(root)
    checkpoints = root.get("checkpoints", required=True)
    cutoff = root.number("drift_cutoff_level", required=False)
    cols = None
    if grid is not None and isinstance(checkpoints, list) and checkpoints:
        cols = {}
        for t in checkpoints:
            try:
                cols[float(t)] = grid.forward_index(float(t))
            except (GridAlignmentError, ValueError, TypeError) as exc:
                root.violations.append(f"checkpoints: {exc}")
    elif not isinstance(checkpoints, list) or not checkpoints:
        root.violations.append("checkpoints: expected a nonempty list of times")
    if cutoff is not None and cutoff <= 0:
        root.violations.append("drift_cutoff_level: must be positive")
    return dict(grid=grid, coeffs=coeffs, segment=segment, n_paths=n_paths,
                seed=seed, conf=conf, chunk=chunk, cols=cols, cutoff=cutoff)


def _prep_verify_bound(root: _Reader) -> dict:
    b = root.child("bound")
    bkind = b.string("kind")
    plan: dict = {"bkind": bkind}
    if bkind == "khasminskii":
        beta = b.child("beta")
        bid = beta.string("id")
        if bid == "constant":
            rate = beta.number("rate")
            if rate is not None and rate < 0:
                root.violations.append("bound.beta.rate: must be nonnegative")
            plan["beta"] = ("constant", rate)
        elif bid == "clipped-square":
            scale = beta.number("scale")
            cap = beta.number("cap")
            if scale is not None and cap is not None and (scale < 0 or cap <= 0):
                root.violations.append("bound.beta: need scale >= 0 and cap > 0")
            plan["beta"] = ("clipped-square", scale, cap)
        elif bid is not None:
            root.violations.append(
                f"bound.beta.id: unknown process {bid!r} (constant, clipped-square)")
        horizon = b.number("T")
        n_steps = b.integer("n_steps", required=False, default=256)
        b.finish()
        n_paths, seed, conf, chunk = _read_mc(root)
        alpha = None
        if plan.get("beta") and None not in plan["beta"][1:] and horizon is not None:
            spec = plan["beta"]
            alpha = (spec[1] * horizon if spec[0] == "constant"
                     else spec[1] * spec[2] * horizon)
            if alpha >= 1.0:
                root.violations.append(
                    f"bound: certificate alpha = {alpha:g} >= 1, "
                    "the exponential bound needs alpha < 1")
        plan.update(T=horizon, n_steps=n_steps, n_paths=n_paths, seed=seed,
                    conf=conf, chunk=chunk, alpha=alpha)
        return plan
    if bkind != "exp-sup-moment":
        root.violations.append(
            f"bound.kind: unknown kind {bkind!r} (exp-sup-moment, khasminskii)")
        b.finish()
        return plan
    variant = b.string("variant", required=False, default="driftless")
    alpha = b.number("alpha")
    kappa = b.number("kappa")
    ladder = b.get("alpha_ladder", required=False, default=None)
    b.finish()
    grid = _read_grid(root)
    coeffs = _read_coefficients(root, grid.d if grid else None)
    segment = _read_segment(root, "initial_segment", grid)
    n_paths, seed, conf, chunk = _read_mc(root)
    if variant not in ("driftless", "drift", "functional"):
        root.violations.append(f"bound.variant: unknown variant {variant!r}")
    denom = {"driftless": 2.0, "drift": 4.0, "functional": 8.0}.get(variant)
    if None not in (alpha, kappa, denom) and grid is not None:
        amax = 1.0 / (denom * grid.d * kappa * grid.T)
        if not 0.0 <= alpha < amax:
            root.violations.append(
                f"bound.alpha: {alpha:g} outside [0, {amax:.6g}) for "
                f"variant {variant!r} (d={grid.d}, kappa={kappa:g}, T={grid.T:g})")
        if ladder is not None:
            if not isinstance(ladder, list) or not ladder:
                root.violations.append("bound.alpha_ladder: expected a list")
            else:
                for a in ladder:
                    if not isinstance(a, (int, float)) or not 0 <= a < amax:
                        root.violations.append(
                            f"bound.alpha_ladder: entry {a!r} outside [0, {amax:.6g})")
    plan.update(grid=grid, coeffs=coeffs, segment=segment, variant=variant,
                alpha=alpha, kappa=kappa, ladder=ladder, n_paths=n_paths,
                seed=seed, conf=conf, chunk=chunk)
    return plan


def _prep_stability(root: _Reader) -> dict:
    grid = _read_grid(root)
    coeffs = _read_coefficients(root, grid.d if grid else None)
    s = root.child("stability")
    base = _read_segment(s, "base_segment", grid)
    direction = _read_segment(s, "direction", grid)
    epsilons = s.get("epsilons", required=True)
    gamma = s.number("gamma")
    s.finish()
    n_paths, seed, conf, chunk = _read_mc(root)
    if isinstance(epsilons, list):
        vals = [e for e in epsilons if isinstance(e, (int, float))]
        if len(vals) != len(epsilons) or any(e <= 0 for e in vals):
            root.violations.append("stability.epsilons: entries must be positive numbers")
        elif len(set(vals)) < 2:
            root.violations.append("stability.epsilons: ladder must contain "
                                   "at least two distinct sizes")
    else:
        root.violations.append("stability.epsilons: expected a list")
        epsilons = None
    if gamma is not None and gamma <= 0:
        root.violations.append("stability.gamma: must be positive")
    return dict(grid=grid, coeffs=coeffs, base=base, direction=direction,
                epsilons=epsilons, gamma=gamma, n_paths=n_paths, seed=seed,
                conf=conf, chunk=chunk)


def _prep_zvonkin(root: _Reader) -> dict:
    grid = None
    if root.has("grid"):
        grid = _read_grid(root)
    p = root.child("pde")
    halfwidth = p.number("halfwidth")
    nx = p.integer("nx")
    n_time = p.integer("n_time")
    t_end = p.number("t_end", required=grid is None,
                     default=grid.T if grid is not None else None)
    boundary = p.string("boundary", required=False, default="dirichlet")
    cell_avg = p.boolean("use_cell_average", default=True)
    p.finish()
    d_hint = grid.d if grid is not None else root.integer("d", required=grid is None)
    coeffs = _read_coefficients(root, d_hint)
    w = root.child("window", required=False)
    threshold = w.number("threshold", required=False, default=0.5)
    w.finish()
    export_grid = root.boolean("export_grid", default=False)
    if boundary not in ("dirichlet", "neumann"):
        root.violations.append(f"pde.boundary: unknown boundary {boundary!r}")
    if threshold is not None and not 0.0 < threshold < 1.0:
        root.violations.append("window.threshold: must lie in (0, 1)")
    pde_grid = None
    if None not in (halfwidth, nx, n_time, t_end) and d_hint in (1, 2):
        try:
            pde_grid = zv.PdeGrid(d=d_hint, halfwidth=halfwidth, nx=nx,
                                  t_end=t_end, n_time=n_time)
        except ValueError as exc:
            root.violations.append(f"pde: {exc}")
    elif d_hint not in (1, 2):
        root.violations.append("pde: needs spatial dimension 1 or 2")

    sandwich = None
    if root.has("sandwich"):
        sw = root.child("sandwich")
        eps = sw.number("epsilon")
        n_pairs = sw.integer("n_pairs")
        sw.finish()
        if eps is not None and eps <= 0:
            root.violations.append("sandwich.epsilon: must be positive")
        if n_pairs is not None and n_pairs < 1:
            root.violations.append("sandwich.n_pairs: must be >= 1")
        sandwich = dict(epsilon=eps, n_pairs=n_pairs)
    residual = None
    if root.has("residual"):
        rs = root.child("residual")
        n_paths_r = rs.integer("n_paths")
        checkpoints = rs.get("checkpoints", required=True)
        rs.finish()
        if not isinstance(checkpoints, list) or not checkpoints:
            root.violations.append("residual.checkpoints: expected a nonempty list")
            checkpoints = []
        residual = dict(n_paths=n_paths_r, checkpoints=checkpoints)
    needs_paths = sandwich is not None or residual is not None
    segment = None
    seed = conf = None
    chunk = 4096
    if needs_paths:
        if grid is None:
            root.violations.append("sandwich/residual sections need a 'grid' section")
        segment = _read_segment(root, "initial_segment", grid)
        n_paths_mc, seed, conf, chunk = _read_mc(root)
        if residual is not None and grid is not None:
            for t in residual["checkpoints"]:
                try:
                    grid.forward_index(float(t))
                except (GridAlignmentError, ValueError, TypeError) as exc:
                    root.violations.append(f"residual.checkpoints: {exc}")
    elif root.has("initial_segment"):
        segment = _read_segment(root, "initial_segment", grid)
    return dict(grid=grid, coeffs=coeffs, pde_grid=pde_grid, boundary=boundary,
                cell_avg=cell_avg, threshold=threshold, export_grid=export_grid,
                sandwich=sandwich, residual=residual, segment=segment,
                seed=seed, conf=conf if conf is not None else 0.99, chunk=chunk)


def _prep_maximal(root: _Reader) -> dict:
    ph = root.child("phi")
    pid = ph.string("id")
    width = ph.number("width", required=False, default=1.0)
    ph.finish()
    halfwidth = root.number("halfwidth")
    nx = root.integer("nx")
    radii = root.get("radii", required=False, default=None)
    probes = root.get("probes", required=False, default=[])
    fn = None
    indicator = None
    if pid == "indicator":
        indicator = float(width)
    elif pid == "gaussian":
        fn = est.gaussian_bump(float(width))
    elif pid == "linear-core":
        fn = est.smooth_linear_core()
    elif pid is not None:
        root.violations.append(
            f"phi.id: unknown function {pid!r} (indicator, gaussian, linear-core)")
    pairs = None
    if root.has("pairs"):
        pr = root.child("pairs")
        n_pairs = pr.integer("n_pairs")
        seed = pr.integer("seed")
        pr.finish()
        if fn is None and pid == "indicator":
            root.violations.append(
                "pairs: the gradient inequality needs a smooth phi "
                "(gaussian or linear-core)")
        pairs = dict(n_pairs=n_pairs, seed=seed)
    if halfwidth is not None and halfwidth <= 0:
        root.violations.append("halfwidth: must be positive")
    if nx is not None and nx < 3:
        root.violations.append("nx: must be >= 3")
    if radii is not None:
        if not isinstance(radii, list) or not radii:
            root.violations.append("radii: expected a nonempty list")
        elif any(not isinstance(x, (int, float)) or x <= 0 for x in radii):
            root.violations.append("radii: entries must be positive numbers")
    if not isinstance(probes, list):
        root.violations.append("probes: expected a list of positions")
        probes = []
    return dict(fn=fn, indicator=indicator, halfwidth=halfwidth, nx=nx,
                radii=radii, probes=probes, pairs=pairs, pid=pid)


def _prep_gronwall(root: _Reader) -> dict:
    hgroup = root.child("harness")
    kind = hgroup.string("kind")
    K = hgroup.number("K")
    C = hgroup.number("C")
    p = hgroup.number("p")
    horizon = hgroup.number("T", required=False, default=1.0)
    n_steps = hgroup.integer("n_steps", required=False, default=256)
    hgroup.finish()
    n_paths, seed, conf, chunk = _read_mc(root)
    if kind is not None and kind not in est._GRONWALL_KINDS:
        root.violations.append(
            f"harness.kind: unknown generator {kind!r} {est._GRONWALL_KINDS}")
    if p is not None and not 0.0 < p < 1.0:
        root.violations.append("harness.p: the inequality covers 0 < p < 1")
    if K is not None and K < 0:
        root.violations.append("harness.K: must be nonnegative")
    if C is not None and C < 0:
        root.violations.append("harness.C: must be nonnegative")
    if kind == "geometric" and K not in (None, 0.0):
        root.violations.append("harness: the geometric generator requires K = 0")
    return dict(kind=kind, K=K, C=C, p=p, T=horizon, n_steps=n_steps,
                n_paths=n_paths, seed=seed, conf=conf, chunk=chunk)


def _prep_krylov(root: _Reader) -> dict:
    grid = _read_grid(root)
    coeffs = _read_coefficients(root, grid.d if grid else None)
    segment = _read_segment(root, "initial_segment", grid)
    n_paths, seed, conf, chunk = _read_mc(root)
    fam = root.child("family")
    epsilons = fam.get("epsilons", required=True)
    p_prime = fam.number("p_prime")
    q_prime = fam.number("q_prime")
    fam.finish()
    driftless = root.boolean("driftless", default=False)
    halving = root.boolean("check_h_halving", default=False)
    if isinstance(epsilons, list) and epsilons:
        if any(not isinstance(e, (int, float)) or e <= 0 for e in epsilons):
            root.violations.append("family.epsilons: entries must be positive")
    else:
        root.violations.append("family.epsilons: expected a nonempty list")
        epsilons = None
    if None not in (p_prime, q_prime) and grid is not None:
        try:
            if not validate_pq(grid.d, p_prime, q_prime, threshold=2):
                root.violations.append(
                    f"family: d/p' + 2/q' = {grid.d / p_prime + 2 / q_prime:g} "
                    ">= 2, the occupation estimate needs it below 2")
        except ValueError as exc:
            root.violations.append(f"family: {exc}")
    return dict(grid=grid, coeffs=coeffs, segment=segment, epsilons=epsilons,
                p_prime=p_prime, q_prime=q_prime, n_paths=n_paths, seed=seed,
                conf=conf, chunk=chunk, driftless=driftless, halving=halving)


_PREP: dict[str, Callable[[_Reader], dict]] = {
    "simulate": _prep_simulate,
    "verify-bound": _prep_verify_bound,
    "stability": _prep_stability,
    "zvonkin": _prep_zvonkin,
    "maximal": _prep_maximal,
    "gronwall": _prep_gronwall,
    "krylov": _prep_krylov,
}


def validate_config(kind: str, config: dict) -> tuple[list[str], dict]:
    """Full structural and cross-field validation; returns (violations, plan)."""
    violations: list[str] = []
    root = _Reader(config, "", violations)
    declared = root.string("kind")
    if declared is not None and declared != kind:
        violations.append(f"kind: config says {declared!r}, run asked for {kind!r}")
    plan = _PREP[kind](root)
    root.finish()
    return violations, plan


# ---------------------------------------------------------------------------
# executors


def _mc_row(t: float, name: str, e: McEstimate) -> tuple:
    return (t, name, e.mean, e.std_error)


def _run_simulate(plan: dict, workers: int, run_dir: str):
    grid: TimeGrid = plan["grid"]
    cfg = SimulationConfig(grid=grid, coefficients=plan["coeffs"],
                           initial_segment=plan["segment"],
                           master_seed=plan["seed"],
                           drift_cutoff_level=plan["cutoff"])
    ens = PathEnsemble(cfg, plan["n_paths"], chunk_size=plan["chunk"],
                       workers=workers)
    d = grid.d
    cols = plan["cols"]
    check_samples = {t: np.empty((ens.n_paths, d)) for t in cols}
    curve_sum = np.zeros((grid.n_steps + 1, d))
    for chunk in ens.chunks():
        fwd = chunk.values[:, grid.m:, :]
        curve_sum += fwd.sum(axis=0)
        for t, col in cols.items():
            check_samples[t][chunk.indices - ens.start_index] = fwd[:, col, :]
    mean_curve = curve_sum / ens.n_paths
    rows = []
    report_checks = {}
    for t in sorted(cols):
        comp = []
        for j in range(d):
            e = McEstimate.from_samples(check_samples[t][:, j], plan["conf"])
            rows.append(_mc_row(t, f"mean[{j}]", e))
            comp.append({"mean": e.mean, "std_error": e.std_error})
        mag = np.sqrt(np.sum(check_samples[t] ** 2, axis=1))
        e = McEstimate.from_samples(mag, plan["conf"])
        rows.append(_mc_row(t, "mean_abs", e))
        report_checks[fmt17(t)] = {"components": comp,
                                   "mean_abs": {"mean": e.mean,
                                                "std_error": e.std_error}}
    times = grid.forward_times()
    plot_data = [("plot_mean_path.txt", times, mean_curve[:, 0],
                  "time mean_component_0")]
    series = [(times, mean_curve[:, j], f"component {j}") for j in range(d)]

    def fig(path):
        line_figure(path, series, "time", "ensemble mean", "Mean trajectory")

    report = {
        "experiment": "simulate",
        "n_paths": ens.n_paths,
        "checkpoints": report_checks,
    }
    return report, rows, plot_data, [("fig_mean_path.png", fig)], []


def _run_verify_bound(plan: dict, workers: int, run_dir: str):
    if plan["bkind"] == "khasminskii":
        spec = plan["beta"]
        beta = (est.beta_constant(spec[1]) if spec[0] == "constant"
                else est.beta_clipped_square(spec[1], spec[2]))
        rep = est.khasminskii_check(beta, plan["T"], n_steps=plan["n_steps"],
                                    n_paths=plan["n_paths"],
                                    master_seed=plan["seed"],
                                    chunk_size=plan["chunk"],
                                    confidence_level=plan["conf"])
        rows = [_mc_row(plan["T"], "exp_integral_lhs", rep.lhs),
                (plan["T"], "khasminskii_rhs", rep.rhs, 0.0)]
        xs = [0.0, 1.0]

        def fig(path):
            line_figure(path, [(xs, [rep.lhs.mean] * 2, "MC estimate"),
                               (xs, [rep.lhs.mean + rep.lhs.confidence_radius] * 2,
                                "upper confidence", "--")],
                        "", "E exp(integral)", "Exponential occupation bound",
                        hline=rep.rhs)

        report = {"experiment": "verify-bound", "bound": rep.to_dict()}
        return report, rows, [], [("fig_bound.png", fig)], []

    grid: TimeGrid = plan["grid"]
    cfg = SimulationConfig(grid=grid, coefficients=plan["coeffs"],
                           initial_segment=plan["segment"],
                           master_seed=plan["seed"])
    driftless = plan["variant"] == "driftless"
    ens = PathEnsemble(cfg, plan["n_paths"], driftless=driftless,
                       chunk_size=plan["chunk"], workers=workers)
    rep = est.exp_sup_moment_check(ens, plan["alpha"], plan["kappa"],
                                   variant=plan["variant"],
                                   confidence_level=plan["conf"])
    rows = [_mc_row(grid.T, "exp_sup_moment_lhs", rep.lhs),
            (grid.T, "exp_sup_moment_rhs", rep.rhs, 0.0)]
    plot_data = []
    figures = []
    curve = None
    if plan["ladder"]:
        sup_sq = ens.collect(lambda ch: np.max(
            np.sum(ch.values[:, grid.m:, :] ** 2, axis=-1), axis=1))
        alphas = sorted(float(a) for a in plan["ladder"])
        lhs_curve = []
        rhs_curve = []
        x0 = np.asarray(cfg.initial_segment)[-1]
        for a in alphas:
            e = McEstimate.from_samples(np.exp(a * sup_sq), plan["conf"])
            lhs_curve.append(e.mean)
            rows.append(_mc_row(grid.T, f"lhs@alpha={a:g}", e))
            if driftless:
                rhs_a = est.exp_moment_rhs(a, grid.d, plan["kappa"], grid.T, x0)
                rhs_curve.append(rhs_a)
                rows.append((grid.T, f"rhs@alpha={a:g}", rhs_a, 0.0))
        plot_data.append(("plot_lhs_vs_alpha.txt", alphas, lhs_curve,
                          "alpha lhs_mean"))
        if rhs_curve:
            plot_data.append(("plot_rhs_vs_alpha.txt", alphas, rhs_curve,
                              "alpha rhs"))
        curve = (alphas, lhs_curve, rhs_curve)

    def fig(path):
        if curve is not None:
            series = [(curve[0], curve[1], "MC estimate", "o-")]
            if curve[2]:
                series.append((curve[0], curve[2], "closed-form bound", "--"))
            line_figure(path, series, "alpha", "E exp(alpha sup|X|^2)",
                        "Exponential sup-moment", logy=True)
        else:
            line_figure(path, [([0, 1], [rep.lhs.mean] * 2, "MC estimate")],
                        "", "lhs", "Exponential sup-moment",
                        hline=rep.rhs if math.isfinite(rep.rhs) else None)

    report = {"experiment": "verify-bound", "bound": rep.to_dict()}
    return report, rows, plot_data, [("fig_bound.png", fig)], []


def _run_stability(plan: dict, workers: int, run_dir: str):
    rep = est.stability_experiment(
        plan["coeffs"], plan["grid"], plan["base"], plan["direction"],
        plan["epsilons"], plan["gamma"], plan["n_paths"], plan["seed"],
        workers=workers, chunk_size=plan["chunk"], confidence_level=plan["conf"])
    grid = plan["grid"]
    rows = []
    for eps, e in zip(rep.epsilons, rep.estimates):
        rows.append(_mc_row(grid.T, f"moment@eps={eps:g}", e))
    rows.append((grid.T, "slope", rep.slope, 0.0))
    rows.append((grid.T, "intercept", rep.intercept, 0.0))
    xs = list(rep.epsilons)
    ys = [e.mean for e in rep.estimates]
    plot_data = [("plot_loglog.txt", xs, ys, "epsilon moment_mean")]
    fit_y = [math.exp(rep.intercept) * x ** rep.slope for x in xs]

    def fig(path):
        line_figure(path, [(xs, ys, "MC moments", "o"),
                           (xs, fit_y, f"fit slope {rep.slope:.3f}", "--")],
                    "perturbation size", "E sup|X - X_hat|^gamma",
                    "Initial-segment stability", logx=True, logy=True)

    report = {
        "experiment": "stability",
        "gamma": rep.gamma,
        "slope": rep.slope,
        "intercept": rep.intercept,
        "empirical_constant": rep.empirical_constant,
        "moments": [{"epsilon": eps, "mean": e.mean, "std_error": e.std_error,
                     "n_samples": e.n_samples}
                    for eps, e in zip(rep.epsilons, rep.estimates)],
    }
    return report, rows, plot_data, [("fig_stability.png", fig)], []


def _run_zvonkin(plan: dict, workers: int, run_dir: str):
    solution = zv.solve_backward_pde(plan["coeffs"], plan["pde_grid"],
                                     boundary=plan["boundary"],
                                     use_cell_average=plan["cell_avg"])
    times, lips = zv.lipschitz_profile(solution)
    rows = [(float(t), "lipschitz", float(v), 0.0) for t, v in zip(times, lips)]
    report: dict = {"experiment": "zvonkin",
                    "boundary": plan["boundary"],
                    "max_correction": float(np.max(np.abs(solution.u_tilde)))}
    try:
        window = zv.contraction_window(solution, threshold=plan["threshold"])
        report["window"] = {"delta": window.delta,
                            "achieved_lipschitz": window.achieved_lipschitz,
                            "threshold": window.threshold}
    except zv.WindowNotFoundError as exc:
        window = None
        report["window"] = {"error": str(exc)}
    plot_data = [("plot_lipschitz.txt", times, lips, "time lipschitz")]
    figures = []

    def fig_lip(path):
        line_figure(path, [(times, lips, "grid Lipschitz constant")],
                    "time", "Lipschitz constant of the correction",
                    "Contraction profile", hline=plan["threshold"],
                    hline_label="threshold")

    figures.append(("fig_lipschitz.png", fig_lip))
    if solution.grid.d == 1:
        ax = solution.grid.axis()
        slice0 = solution.u_tilde[0, :, 0]

        def fig_slice(path):
            line_figure(path, [(ax, slice0, "correction at t_start")],
                        "x", "correction", "Transform correction")

        figures.append(("fig_slice.png", fig_slice))
        plot_data.append(("plot_slice.txt", ax, slice0, "x correction_t_start"))
    extra = []
    if plan["export_grid"]:
        gpath = os.path.join(run_dir, "u_tilde.grid.txt")
        solution.export_grid_file(gpath)
        extra.append("u_tilde.grid.txt")
    grid = plan["grid"]
    if plan["sandwich"] is not None and window is not None:
        base = plan["segment"]
        eps = plan["sandwich"]["epsilon"]
        cfg_a = SimulationConfig(grid=grid, coefficients=plan["coeffs"],
                                 initial_segment=base, master_seed=plan["seed"])
        cfg_b = SimulationConfig(grid=grid, coefficients=plan["coeffs"],
                                 initial_segment=np.asarray(base) + eps,
                                 master_seed=plan["seed"])
        pairs = CoupledPathEnsemble(cfg_a, cfg_b, plan["sandwich"]["n_pairs"],
                                    chunk_size=plan["chunk"], workers=workers)
        sw = zv.sandwich_check(pairs, solution, window)
        report["sandwich"] = {
            "n_pairs": sw.n_pairs, "n_checked": sw.n_checked,
            "n_failures": sw.n_failures, "fraction_ok": sw.fraction_ok,
            "worst_lower": sw.worst_lower, "worst_upper": sw.worst_upper,
            "window_delta": sw.window.delta,
        }
        rows.append((grid.T, "sandwich_fraction_ok", sw.fraction_ok, 0.0))
    elif plan["sandwich"] is not None:
        report["sandwich"] = {"error": "no contraction window"}
    if plan["residual"] is not None:
        cfg = SimulationConfig(grid=grid, coefficients=plan["coeffs"],
                               initial_segment=plan["segment"],
                               master_seed=plan["seed"])
        ens = PathEnsemble(cfg, plan["residual"]["n_paths"],
                           chunk_size=plan["chunk"], workers=workers)
        res = zv.ito_residual(ens, solution, plan["coeffs"],
                              [float(t) for t in plan["residual"]["checkpoints"]],
                              confidence_level=plan["conf"])
        report["residual"] = {}
        for t in sorted(res):
            comps = []
            for j, e in enumerate(res[t]):
                rows.append(_mc_row(t, f"residual[{j}]", e))
                comps.append({"mean": e.mean, "std_error": e.std_error})
            report["residual"][fmt17(t)] = comps
    return report, rows, plot_data, figures, extra


def _run_maximal(plan: dict, workers: int, run_dir: str):
    halfwidth, nx = plan["halfwidth"], plan["nx"]
    dx = 2.0 * halfwidth / (nx - 1)
    axis = -halfwidth + dx * np.arange(nx)
    if plan["indicator"] is not None:
        w = plan["indicator"]
        phi_vals = np.where(np.abs(axis) <= w, 1.0, 0.0)
        name = f"indicator-[{-w:g},{w:g}]"
    else:
        phi_vals = np.abs(np.asarray(plan["fn"].eval(axis), float))
        name = plan["fn"].name
    mphi = est.maximal_function(phi_vals, dx, plan["radii"])
    rows = []
    report: dict = {"experiment": "maximal", "phi": name, "dx": dx}
    for x in plan["probes"]:
        idx = int(round((float(x) + halfwidth) / dx))
        idx = min(max(idx, 0), nx - 1)
        rows.append((0.0, f"M_phi@x={float(x):g}", float(mphi[idx]), 0.0))
    report["probes"] = {fmt17(float(x)): float(mphi[min(max(int(round((float(x) + halfwidth) / dx)), 0), nx - 1)])
                        for x in plan["probes"]}
    if plan["pairs"] is not None:
        hl = est.hardy_littlewood_check(plan["fn"], halfwidth=halfwidth, nx=nx,
                                        n_pairs=plan["pairs"]["n_pairs"],
                                        seed=plan["pairs"]["seed"],
                                        radii=plan["radii"])
        rows.append((0.0, "fitted_cd", hl.fitted_cd, 0.0))
        for p, ratio in sorted(hl.lp_ratios.items()):
            rows.append((0.0, f"lp_ratio@p={p:g}", ratio, 0.0))
        report["hardy_littlewood"] = {
            "fitted_cd": hl.fitted_cd,
            "worst_pair": list(hl.worst_pair),
            "n_pairs": hl.n_pairs,
            "lp_ratios": {fmt17(p): r for p, r in hl.lp_ratios.items()},
        }
    plot_data = [("plot_phi.txt", axis, phi_vals, "x phi"),
                 ("plot_maximal.txt", axis, mphi, "x M_phi")]

    def fig(path):
        line_figure(path, [(axis, phi_vals, "phi"), (axis, mphi, "M phi")],
                    "x", "value", "Maximal function")

    return report, rows, plot_data, [("fig_maximal.png", fig)], []


def _run_gronwall(plan: dict, workers: int, run_dir: str):
    rep = est.stochastic_gronwall_harness(
        plan["kind"], plan["K"], plan["C"], plan["p"], T=plan["T"],
        n_steps=plan["n_steps"], n_paths=plan["n_paths"],
        master_seed=plan["seed"], chunk_size=plan["chunk"],
        confidence_level=plan["conf"])
    T = plan["T"]
    rows = [_mc_row(T, "sup_moment", rep.estimate),
            (T, "scale_ratio_error", rep.scale_ratio_error, 0.0),
            (T, "growth_ratio", rep.growth_ratio, 0.0)]
    fracs = [0.25, 0.5, 1.0]
    for f, m in zip(fracs, rep.prefix_means):
        rows.append((T, f"prefix_mean@{f:g}", m, 0.0))
    if rep.fitted_rate is not None:
        rows.append((T, "fitted_rate", rep.fitted_rate, 0.0))

    def fig(path):
        line_figure(path, [(fracs, list(rep.prefix_means), "prefix means", "o-")],
                    "ensemble fraction", "E sup Z^p",
                    f"Gronwall harness ({rep.kind})")

    report = {
        "experiment": "gronwall",
        "kind": rep.kind, "K": rep.K, "C": rep.C, "p": rep.p,
        "estimate": {"mean": rep.estimate.mean,
                     "std_error": rep.estimate.std_error,
                     "n_samples": rep.estimate.n_samples},
        "prefix_means": list(rep.prefix_means),
        "stable": rep.stable,
        "scale_ratio_error": rep.scale_ratio_error,
        "growth_ratio": rep.growth_ratio,
        "fitted_rate": rep.fitted_rate,
    }
    return report, rows, [("plot_prefix.txt", fracs, list(rep.prefix_means),
                           "fraction prefix_mean")], [("fig_gronwall.png", fig)], []


def _run_krylov(plan: dict, workers: int, run_dir: str):
    grid: TimeGrid = plan["grid"]
    family = est.shrinking_support_family(plan["epsilons"], grid.d,
                                          plan["p_prime"], plan["q_prime"],
                                          grid.T)
    cfg = SimulationConfig(grid=grid, coefficients=plan["coeffs"],
                           initial_segment=plan["segment"],
                           master_seed=plan["seed"])
    ens = PathEnsemble(cfg, plan["n_paths"], driftless=plan["driftless"],
                       chunk_size=plan["chunk"], workers=workers)
    reports = [est.krylov_check(ens, f, confidence_level=plan["conf"])
               for f in family]
    fitted = est.fit_krylov_constant(reports)
    rows = []
    for f, rep in zip(family, reports):
        eps = float(f.name.split("=")[-1])
        rows.append(_mc_row(grid.T, f"occupation@eps={eps:g}", rep.lhs))
        rows.append((grid.T, f"ratio@eps={eps:g}",
                     float(rep.parameters["ratio"]), 0.0))
    rows.append((grid.T, "fitted_constant", fitted, 0.0))
    report = {
        "experiment": "krylov",
        "fitted_constant": fitted,
        "norm": family[0].norm_analytic,
        "checks": [r.to_dict() for r in reports],
    }
    if plan["halving"]:
        half_grid = TimeGrid(d=grid.d, r=grid.r, T=grid.T, h=grid.h / 2)
        seg = plan["segment"]
        if np.asarray(seg).ndim == 2:
            base = np.asarray(seg)
            coarse_t = np.arange(base.shape[0], dtype=float)
            fine_t = np.arange(base.shape[0] * 2 - 1, dtype=float) / 2
            seg = np.stack([np.interp(fine_t, coarse_t, base[:, j])
                            for j in range(base.shape[1])], axis=1)
        cfg2 = SimulationConfig(grid=half_grid, coefficients=plan["coeffs"],
                                initial_segment=seg, master_seed=plan["seed"])
        ens2 = PathEnsemble(cfg2, plan["n_paths"], driftless=plan["driftless"],
                            chunk_size=plan["chunk"], workers=workers)
        reports2 = [est.krylov_check(ens2, f, confidence_level=plan["conf"])
                    for f in family]
        fitted2 = est.fit_krylov_constant(reports2)
        drift_ratio = fitted2 / fitted if fitted > 0 else math.inf
        rows.append((grid.T, "fitted_constant_half_h", fitted2, 0.0))
        rows.append((grid.T, "h_halving_ratio", drift_ratio, 0.0))
        report["fitted_constant_half_h"] = fitted2
        report["h_halving_ratio"] = drift_ratio
    eps_list = [float(f.name.split("=")[-1]) for f in family]
    ratios = [float(r.parameters["ratio_upper"]) for r in reports]
    plot_data = [("plot_ratio_vs_eps.txt", eps_list, ratios,
                  "epsilon ratio_upper")]

    def fig(path):
        line_figure(path, [(eps_list, ratios, "upper ratio", "o-")],
                    "support size", "occupation / norm",
                    "Shrinking-support occupation", logx=True,
                    hline=fitted, hline_label="fitted constant")

    return report, rows, plot_data, [("fig_krylov.png", fig)], []


_EXEC = {
    "simulate": _run_simulate,
    "verify-bound": _run_verify_bound,
    "stability": _run_stability,
    "zvonkin": _run_zvonkin,
    "maximal": _run_maximal,
    "gronwall": _run_gronwall,
    "krylov": _run_krylov,
}


# ---------------------------------------------------------------------------
# orchestration


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        loc = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"config parse error{loc}: {exc}")
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return data


def _apply_seed_override(config: dict, seed: Optional[int]) -> dict:
    if seed is None:
        return config
    out = json.loads(json.dumps(config))
    if isinstance(out.get("mc"), dict):
        out["mc"]["master_seed"] = seed
    elif isinstance(out.get("pairs"), dict):
        out["pairs"]["seed"] = seed
    else:
        out["mc"] = {"n_paths": None, "master_seed": seed}
    return out


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def run(kind: str, config_path: str, out_dir: str, threads: int,
        seed: Optional[int]) -> int:
    try:
        config = load_config(config_path)
    except ConfigError as exc:
        _emit({"error": "parse", "detail": str(exc)})
        return 2
    config = _apply_seed_override(config, seed)
    violations, plan = validate_config(kind, config)
    if violations:
        _emit({"error": "validation", "violations": violations})
        return 2
    cfg_hash = canonical_config_hash(config)
    run_dir = os.path.join(out_dir, f"{kind}-{cfg_hash[:12]}")
    os.makedirs(run_dir, exist_ok=True)
    master_seed = (config.get("mc") or {}).get("master_seed",
                                               (config.get("pairs") or {}).get("seed", 0))
    manifest = RunManifest(config_hash=cfg_hash, code_version=__version__,
                           master_seed=int(master_seed or 0), wall_time_s=0.0)
    t0 = time.monotonic()
    try:
        report, rows, plot_data, figures, extra = _EXEC[kind](plan, threads, run_dir)
    except Exception as exc:  # noqa: BLE001 - failure record in the manifest
        manifest.wall_time_s = time.monotonic() - t0
        manifest.status = "failed"
        manifest.error = f"{type(exc).__name__}: {exc}"
        manifest.write(os.path.join(run_dir, "manifest.json"))
        _emit({"error": "experiment", "detail": manifest.error,
               "run_dir": run_dir})
        return 3
    report["config_hash"] = cfg_hash
    report["kind"] = kind
    outputs = list(extra)
    write_json(os.path.join(run_dir, "report.json"), report)
    outputs.append("report.json")
    write_csv(os.path.join(run_dir, "series.csv"), rows)
    outputs.append("series.csv")
    for fname, xs, ys, label in plot_data:
        write_plot_data(os.path.join(run_dir, fname), xs, ys, label)
        outputs.append(fname)
    for fname, render in figures:
        render(os.path.join(run_dir, fname))
        outputs.append(fname)
    manifest.wall_time_s = time.monotonic() - t0
    manifest.outputs = outputs
    manifest.write(os.path.join(run_dir, "manifest.json"))
    _emit({"status": "ok", "run_dir": run_dir, "config_hash": cfg_hash,
           "outputs": sorted(outputs)})
    return 0


def validate(config_path: str) -> int:
    try:
        config = load_config(config_path)
    except ConfigError as exc:
        _emit({"error": "parse", "detail": str(exc)})
        return 2
    kind = config.get("kind")
    if kind not in KINDS:
        _emit({"error": "validation",
               "violations": [f"kind: expected one of {list(KINDS)}, got {kind!r}"]})
        return 1
    violations, _ = validate_config(kind, config)
    _emit({"valid": not violations, "violations": violations})
    return 0 if not violations else 1


def _default_threads() -> int:
    raw = os.environ.get(ENV_THREADS, "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="sddelab",
        description="Simulation and verification lab for singular-drift "
                    "delay equations")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        sp = sub.add_parser(kind, help=f"run a {kind} experiment")
        sp.add_argument("--config", required=True, help="config file (YAML/JSON)")
        sp.add_argument("--out", default="runs", help="output base directory")
        sp.add_argument("--threads", type=int, default=_default_threads(),
                        help=f"worker threads (default ${ENV_THREADS} or 1)")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config's master seed")
    vp = sub.add_parser("validate", help="validate a config without running")
    vp.add_argument("--config", required=True, help="config file (YAML/JSON)")
    args = parser.parse_args(argv)
    if args.command == "validate":
        return validate(args.config)
    return run(args.command, args.config, args.out, max(1, args.threads),
               args.seed)


if __name__ == "__main__":
    sys.exit(main())
