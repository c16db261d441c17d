"""Euler-Maruyama engine for delay equations, with localization hooks.

Paths are advanced on the shared :class:`~sddelab.core.TimeGrid`:

    X(t+h) = X(t) + [V(t, X_segment) + b(t, X(t))] h + sigma(t, X(t)) dW

Noise comes from per-path counter-based streams (see :mod:`sddelab.rng`),
so every path is a pure function of ``(config, master_seed, path_index)``
and a driftless companion driven by the same stream couples exactly.
Ensembles are generated in chunks; reductions collect per-path values
into index order and sum them exactly, which makes every reported
statistic independent of chunk size and worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .coefficients import CoefficientSet, DriftSpec, FunctionalDriftSpec
from .core import (CompactSetSpec, PathRole, SamplePath, TimeGrid,
                   McEstimate, compact_membership, segment_extract)
from . import rng

__all__ = [
    "SimulationDiverged",
    "StoppingKind",
    "StoppingRecord",
    "LocalizationSpec",
    "SimulationConfig",
    "simulate_path",
    "simulate_driftless",
    "simulate_pair",
    "truncate_coefficients",
    "detect_stopping",
    "PathChunk",
    "PathEnsemble",
    "CoupledPathEnsemble",
    "refinement_study",
]


class SimulationDiverged(RuntimeError):
    """A state became non-finite; carries the first bad step and path."""

    def __init__(self, step_index: int, path_index: int):
        super().__init__(f"non-finite state at step {step_index} (path {path_index})")
        self.step_index = step_index
        self.path_index = path_index


class StoppingKind(str, Enum):
    HORIZON = "horizon"
    STATE_EXCEEDED = "state_exceeded"
    FUNCTIONAL_EXCEEDED = "functional_exceeded"
    COMPACT_EXIT = "compact_exit"
    DOMAIN_EXIT = "domain_exit"


@dataclass(frozen=True)
class StoppingRecord:
    """First grid time a path left its prescribed region, if any."""

    kind: StoppingKind
    time: float
    level: float


@dataclass(frozen=True)
class LocalizationSpec:
    """Level-n localization of coefficients.

    The radial taper uses the profile

        rho(s) = n + 1 - ((s - n)/alpha + 1)^(-alpha),   s >= n,

    with ``alpha = (p_next - d) / 2``; it is C^1, strictly increasing and
    approaches n+1, so the tapered point map ``phi`` is the identity on
    the level-n ball and lands inside the (n+1)-ball.
    """

    n: float
    d: int
    p_next: float = 0.0

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("localization level must be positive")
        p_next = self.p_next if self.p_next else self.d + 2.0
        if p_next <= self.d:
            raise ValueError("p_next must exceed the dimension")
        object.__setattr__(self, "p_next", p_next)

    @property
    def alpha(self) -> float:
        return (self.p_next - self.d) / 2.0

    def rho(self, s: np.ndarray | float) -> np.ndarray:
        """Taper profile for radii s >= n."""
        s = np.asarray(s, float)
        a = self.alpha
        return self.n + 1.0 - ((s - self.n) / a + 1.0) ** (-a)

    def phi(self, x: np.ndarray) -> np.ndarray:
        """Radial retraction: identity inside the n-ball, tapered outside."""
        x = np.asarray(x, float)
        rad = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
        with np.errstate(invalid="ignore", divide="ignore"):
            scale = np.where(rad > self.n, self.rho(np.maximum(rad, self.n)) / np.maximum(rad, 1e-300), 1.0)
        return x * scale

    def validate(self, n_probe: int = 256) -> None:
        """Numerical sanity check of the taper profile."""
        s = self.n + np.linspace(0.0, 50.0, n_probe)
        vals = self.rho(s)
        if abs(vals[0] - self.n) > 1e-12 * max(1.0, self.n):
            raise AssertionError("rho(n) != n")
        if np.any(np.diff(vals) <= 0.0):
            raise AssertionError("rho is not strictly increasing")
        if np.any(vals >= self.n + 1.0):
            raise AssertionError("rho exceeds n + 1")


@dataclass(frozen=True)
class SimulationConfig:
    """Everything a path is a function of (besides its index).

    ``initial_segment`` may be a single state vector (held constant over
    [-r, 0]) or a full ``(m+1, d)`` sample.  When ``drift_cutoff_level``
    is set, coefficients are localized at that level before stepping and
    each simulated path carries the matching stopping record.
    """

    grid: TimeGrid
    coefficients: CoefficientSet
    initial_segment: np.ndarray
    master_seed: int
    drift_cutoff_level: Optional[float] = None

    def __post_init__(self):
        if self.coefficients.d != self.grid.d:
            raise ValueError("coefficient dimension does not match the grid")
        seg = np.asarray(self.initial_segment, dtype=float)
        if seg.ndim <= 1:
            seg = np.broadcast_to(seg.reshape(self.grid.d),
                                  (self.grid.m + 1, self.grid.d)).copy()
        if seg.shape != (self.grid.m + 1, self.grid.d):
            raise ValueError(f"initial segment must have shape {(self.grid.m + 1, self.grid.d)}")
        seg.flags.writeable = False
        object.__setattr__(self, "initial_segment", seg)

    def effective_coefficients(self) -> CoefficientSet:
        if self.drift_cutoff_level is None:
            return self.coefficients
        loc = LocalizationSpec(n=self.drift_cutoff_level, d=self.grid.d)
        return truncate_coefficients(self.coefficients, loc)


# ---------------------------------------------------------------------------
# localization


def truncate_coefficients(coeffs: CoefficientSet, loc: LocalizationSpec) -> CoefficientSet:
    """Level-n coefficients: windowed drift, tapered diffusion, clamped functional.

    Inside the level-n region the wrapped evaluators return bit-identical
    values (indicators multiply by selecting, the taper is the identity,
    the clamp is inactive), which is what makes stopped comparisons of
    truncated and raw runs exact.
    """
    n = loc.n
    base_b = coeffs.drift.eval
    base_s = coeffs.diffusion.eval
    base_v = coeffs.functional.eval

    def b_eval(t, x, _b=base_b):
        x = np.asarray(x, float)
        out = np.asarray(_b(t, x), float)
        if t > n:
            return np.zeros_like(out)
        inside = np.sum(x * x, axis=-1) <= n * n
        return np.where(inside[..., None], out, 0.0)

    base_ca = coeffs.drift.cell_average
    ca = None
    if base_ca is not None:
        def ca(t, centers, dx, _ca=base_ca):
            out = np.asarray(_ca(t, centers, dx), float)
            if t > n:
                return np.zeros_like(out)
            inside = np.abs(np.asarray(centers, float)) <= n
            return np.where(inside[:, None], out, 0.0)

    drift = replace(coeffs.drift, name=coeffs.drift.name + f"|n={n:g}",
                    eval=b_eval, lqp_norm_analytic=None, cell_average=ca)

    def s_eval(t, x, _s=base_s):
        return _s(t, loc.phi(np.asarray(x, float)))

    diffusion = replace(coeffs.diffusion, name=coeffs.diffusion.name + f"|n={n:g}",
                        eval=s_eval)

    def v_eval(t, seg, h, _v=base_v):
        return np.clip(np.asarray(_v(t, seg, h), float), -n, n)

    cap = math.sqrt(coeffs.d) * n
    base_g = coeffs.functional.growth_g
    functional = replace(coeffs.functional, name=coeffs.functional.name + f"|n={n:g}",
                         eval=v_eval, growth_g=lambda u: min(base_g(u), cap))

    return CoefficientSet(d=coeffs.d, drift=drift, diffusion=diffusion,
                          functional=functional)


# ---------------------------------------------------------------------------
# stepping


def _step_chunk(grid: TimeGrid, coeffs: CoefficientSet, init: np.ndarray,
                increments: np.ndarray, driftless: bool,
                first_path_index: int) -> np.ndarray:
    """Advance a chunk of paths; returns values of shape (B, n_times, d)."""
    B = increments.shape[0]
    m, n, d, h = grid.m, grid.n_steps, grid.d, grid.h
    values = np.empty((B, grid.n_times, d))
    values[:, : m + 1, :] = init
    b_eval = coeffs.drift.eval
    s_eval = coeffs.diffusion.eval
    v_eval = coeffs.functional.eval
    for k in range(n):
        t = k * h
        state = values[:, m + k, :]
        sig = np.asarray(s_eval(t, state), float)
        nxt = state + np.einsum("bij,bj->bi", sig, increments[:, k, :])
        if not driftless:
            drift = np.asarray(b_eval(t, state), float)
            seg = values[:, k : m + k + 1, :]
            drift = drift + np.asarray(v_eval(t, seg, h), float)
            nxt = nxt + h * drift
        if not np.all(np.isfinite(nxt)):
            bad = int(np.argwhere(~np.isfinite(nxt).all(axis=-1))[0, 0])
            raise SimulationDiverged(step_index=k + 1,
                                     path_index=first_path_index + bad)
        values[:, m + k + 1, :] = nxt
    return values


def _chunk_increments(config: SimulationConfig, indices: np.ndarray) -> np.ndarray:
    g = config.grid
    out = np.empty((indices.size, g.n_steps, g.d))
    for row, idx in enumerate(indices):
        out[row] = rng.brownian_increments(config.master_seed, int(idx),
                                           g.n_steps, g.d, g.h)
    return out


@dataclass(frozen=True)
class PathChunk:
    """A contiguous block of simulated paths."""

    grid: TimeGrid
    indices: np.ndarray
    values: np.ndarray      # (B, n_times, d)
    increments: np.ndarray  # (B, n_steps, d)

    def segment_block(self, t: float) -> np.ndarray:
        """Segment values of every path at forward time t: (B, m+1, d)."""
        k = self.grid.forward_index(t)
        return self.values[:, k : k + self.grid.m + 1, :]


def _simulate_chunk(config: SimulationConfig, indices: np.ndarray,
                    driftless: bool = False,
                    increments: Optional[np.ndarray] = None) -> PathChunk:
    coeffs = config.effective_coefficients()
    if increments is None:
        increments = _chunk_increments(config, indices)
    values = _step_chunk(config.grid, coeffs, config.initial_segment,
                         increments, driftless, int(indices[0]))
    return PathChunk(grid=config.grid, indices=np.asarray(indices),
                     values=values, increments=increments)


def simulate_path(config: SimulationConfig, path_index: int
                  ) -> tuple[SamplePath, StoppingRecord, np.ndarray]:
    """One EM path plus its stopping record and Brownian increments.

    The record reports the first level crossing when a drift cutoff level
    is configured, otherwise the horizon.
    """
    chunk = _simulate_chunk(config, np.array([path_index]))
    path = SamplePath(config.grid, chunk.values[0], role=PathRole.SOLUTION)
    if config.drift_cutoff_level is not None:
        record = detect_stopping(path, config.effective_coefficients(),
                                 config.drift_cutoff_level)
    else:
        record = StoppingRecord(StoppingKind.HORIZON, config.grid.T, math.inf)
    return path, record, chunk.increments[0]


def simulate_driftless(config: SimulationConfig, path_index: int
                       ) -> tuple[SamplePath, np.ndarray]:
    """Driftless companion driven by the same noise stream as the path."""
    chunk = _simulate_chunk(config, np.array([path_index]), driftless=True)
    return SamplePath(config.grid, chunk.values[0], role=PathRole.DRIFTLESS), chunk.increments[0]


def simulate_pair(config_a: SimulationConfig, config_b: SimulationConfig,
                  path_index: int) -> tuple[SamplePath, SamplePath, np.ndarray]:
    """Two solutions driven by identical increments (coupled comparison)."""
    if config_a.grid != config_b.grid:
        raise ValueError("coupled configs must share the grid")
    inc = _chunk_increments(config_a, np.array([path_index]))
    a = _simulate_chunk(config_a, np.array([path_index]), increments=inc)
    b = _simulate_chunk(config_b, np.array([path_index]), increments=inc)
    return (SamplePath(config_a.grid, a.values[0]),
            SamplePath(config_b.grid, b.values[0]), inc[0])


# ---------------------------------------------------------------------------
# stopping detection


def detect_stopping(path: SamplePath, coeffs: CoefficientSet,
                    spec: CompactSetSpec | float) -> StoppingRecord:
    """First forward grid time the path leaves its region.

    With a :class:`CompactSetSpec`, the region is the path-space compact
    set (segment-wise membership).  With a numeric level n, the region is
    ``|X(t)| <= n`` and ``|V(t, X_segment)| <= n``.
    """
    grid = path.grid
    times = grid.forward_times()
    if isinstance(spec, CompactSetSpec):
        for t in times:
            if not compact_membership(segment_extract(path, float(t)), spec):
                return StoppingRecord(StoppingKind.COMPACT_EXIT, float(t), spec.n)
        return StoppingRecord(StoppingKind.HORIZON, grid.T, spec.n)
    n = float(spec)
    state = path.values[grid.m :]
    norms = np.sqrt(np.sum(state * state, axis=-1))
    v_eval = coeffs.functional.eval
    for k, t in enumerate(times):
        if norms[k] > n:
            return StoppingRecord(StoppingKind.STATE_EXCEEDED, float(t), n)
        seg = path.values[k : k + grid.m + 1]
        v = np.asarray(v_eval(float(t), seg[None, :, :], grid.h), float)
        if math.sqrt(float(np.sum(v * v))) > n:
            return StoppingRecord(StoppingKind.FUNCTIONAL_EXCEEDED, float(t), n)
    return StoppingRecord(StoppingKind.HORIZON, grid.T, n)


# ---------------------------------------------------------------------------
# ensembles


class PathEnsemble:
    """Lazy ensemble of independent paths; chunks are regenerated on demand.

    ``collect(payoff)`` evaluates a vectorized per-path functional over
    the chunks and returns the values in path-index order, so every
    downstream statistic is invariant under chunk size and worker count.
    """

    def __init__(self, config: SimulationConfig, n_paths: int,
                 driftless: bool = False, chunk_size: int = 4096,
                 workers: int = 1, start_index: int = 0):
        if n_paths < 1:
            raise ValueError("need at least one path")
        self.config = config
        self.n_paths = int(n_paths)
        self.driftless = bool(driftless)
        self.chunk_size = max(1, int(chunk_size))
        self.workers = max(1, int(workers))
        self.start_index = int(start_index)

    @property
    def grid(self) -> TimeGrid:
        return self.config.grid

    def _index_blocks(self) -> list[np.ndarray]:
        lo = self.start_index
        hi = self.start_index + self.n_paths
        return [np.arange(a, min(a + self.chunk_size, hi))
                for a in range(lo, hi, self.chunk_size)]

    def chunks(self) -> Iterator[PathChunk]:
        blocks = self._index_blocks()
        if self.workers == 1:
            for block in blocks:
                yield _simulate_chunk(self.config, block, self.driftless)
        else:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                futures = [pool.submit(_simulate_chunk, self.config, block, self.driftless)
                           for block in blocks]
                for fut in futures:
                    yield fut.result()

    def collect(self, payoff: Callable[[PathChunk], np.ndarray]) -> np.ndarray:
        """Per-path payoff values, ordered by path index."""
        out = np.empty(self.n_paths)
        for chunk in self.chunks():
            vals = np.asarray(payoff(chunk), float).reshape(chunk.indices.size)
            out[chunk.indices - self.start_index] = vals
        return out

    def estimate(self, payoff: Callable[[PathChunk], np.ndarray],
                 confidence_level: float = 0.99) -> McEstimate:
        return McEstimate.from_samples(self.collect(payoff), confidence_level)

    def prefix_estimates(self, payoff: Callable[[PathChunk], np.ndarray],
                         fractions: Sequence[float] = (0.25, 0.5, 1.0),
                         confidence_level: float = 0.99) -> list[McEstimate]:
        """Estimates over nested path prefixes (ensemble-growth diagnostics)."""
        vals = self.collect(payoff)
        out = []
        for f in fractions:
            k = max(1, int(round(f * self.n_paths)))
            out.append(McEstimate.from_samples(vals[:k], confidence_level))
        return out


class CoupledPathEnsemble:
    """Pairs of solutions driven by identical noise, chunk by chunk."""

    def __init__(self, config_a: SimulationConfig, config_b: SimulationConfig,
                 n_paths: int, chunk_size: int = 4096, workers: int = 1,
                 start_index: int = 0):
        if config_a.grid != config_b.grid:
            raise ValueError("coupled configs must share the grid")
        if config_a.master_seed != config_b.master_seed:
            raise ValueError("coupled configs must share the master seed")
        self.config_a = config_a
        self.config_b = config_b
        self.n_paths = int(n_paths)
        self.chunk_size = max(1, int(chunk_size))
        self.workers = max(1, int(workers))
        self.start_index = int(start_index)

    @property
    def grid(self) -> TimeGrid:
        return self.config_a.grid

    def _simulate_block(self, block: np.ndarray) -> tuple[PathChunk, PathChunk]:
        inc = _chunk_increments(self.config_a, block)
        a = _simulate_chunk(self.config_a, block, increments=inc)
        b = _simulate_chunk(self.config_b, block, increments=inc)
        return a, b

    def chunks(self) -> Iterator[tuple[PathChunk, PathChunk]]:
        lo = self.start_index
        hi = self.start_index + self.n_paths
        blocks = [np.arange(s, min(s + self.chunk_size, hi))
                  for s in range(lo, hi, self.chunk_size)]
        if self.workers == 1:
            for block in blocks:
                yield self._simulate_block(block)
        else:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                futures = [pool.submit(self._simulate_block, block) for block in blocks]
                for fut in futures:
                    yield fut.result()

    def collect(self, payoff: Callable[[PathChunk, PathChunk], np.ndarray]) -> np.ndarray:
        out = np.empty(self.n_paths)
        for a, b in self.chunks():
            out[a.indices - self.start_index] = np.asarray(payoff(a, b), float)
        return out

    def estimate(self, payoff, confidence_level: float = 0.99) -> McEstimate:
        return McEstimate.from_samples(self.collect(payoff), confidence_level)


# ---------------------------------------------------------------------------
# refinement


def refinement_study(config: SimulationConfig, n_paths: int,
                     factors: Sequence[int] = (2, 4, 8, 16),
                     chunk_size: int = 1024) -> dict:
    """Coupled strong-error refinement study at the horizon.

    The finest grid (step ``h / max(factors)``) serves as reference; all
    coarser runs consume aggregated blocks of the same fine increments,
    so the errors measure the scheme, not the noise.  Returns the mean
    absolute endpoint errors per factor and the fitted order in h.
    """
    factors = sorted(set(int(f) for f in factors))
    if factors[0] < 2:
        raise ValueError("refinement factors must be >= 2")
    finest = factors[-1]
    g = config.grid
    fine_grid = TimeGrid(d=g.d, r=g.r, T=g.T, h=g.h / finest)

    def refine_segment(seg: np.ndarray, mult: int) -> np.ndarray:
        # linear interpolation of the history onto the finer lattice
        coarse_t = np.arange(seg.shape[0], dtype=float)
        fine_t = np.arange(seg.shape[0] * mult - (mult - 1), dtype=float) / mult
        cols = [np.interp(fine_t, coarse_t, seg[:, j]) for j in range(seg.shape[1])]
        return np.stack(cols, axis=1)

    grids = {}
    inits = {}
    for f in factors:
        sub = TimeGrid(d=g.d, r=g.r, T=g.T, h=g.h / f)
        grids[f] = sub
        inits[f] = refine_segment(np.asarray(config.initial_segment), f)
    grids[1] = g
    inits[1] = np.asarray(config.initial_segment)

    coeffs = config.effective_coefficients()
    levels = [1] + factors
    err_sums = {f: [] for f in levels[:-1]}
    for lo in range(0, n_paths, chunk_size):
        block = np.arange(lo, min(lo + chunk_size, n_paths))
        fine_inc = np.empty((block.size, fine_grid.n_steps, g.d))
        for row, idx in enumerate(block):
            fine_inc[row] = rng.brownian_increments(config.master_seed, int(idx),
                                                    fine_grid.n_steps, g.d, fine_grid.h)
        ref = _step_chunk(fine_grid, coeffs, inits[finest], fine_inc, False, int(block[0]))
        ref_end = ref[:, -1, :]
        for f in levels[:-1]:
            mult = finest // f
            agg = fine_inc.reshape(block.size, grids[f].n_steps, mult, g.d).sum(axis=2)
            vals = _step_chunk(grids[f], coeffs, inits[f], agg, False, int(block[0]))
            diff = vals[:, -1, :] - ref_end
            err_sums[f].extend(np.sqrt(np.sum(diff * diff, axis=-1)).tolist())

    hs = np.array([g.h / f for f in levels[:-1]])
    errs = np.array([math.fsum(err_sums[f]) / n_paths for f in levels[:-1]])
    mask = errs > 0
    order = float("nan")
    if mask.sum() >= 2:
        slope = np.polyfit(np.log(hs[mask]), np.log(errs[mask]), 1)[0]
        order = float(slope)
    return {"h": hs.tolist(), "mean_abs_error": errs.tolist(), "observed_order": order}
