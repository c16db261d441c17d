"""Monte-Carlo and grid verification of the quantitative estimates.

Each check pairs a simulated left-hand side with whatever the theory
pins down: a closed-form right-hand side where one exists, otherwise a
fitted constant together with stability diagnostics (the estimate holds
with *some* finite constant, so the empirical constant must not drift
as the ensemble grows or the test family shrinks its support).

Reductions are order-insensitive: per-path samples are collected in
path-index order and summed with ``math.fsum``, so reports do not
depend on chunking or thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import rng
from .coefficients import CoefficientSet
from .core import McEstimate, TimeGrid, validate_pq
from .engine import (CoupledPathEnsemble, PathChunk, PathEnsemble,
                     SimulationConfig, _step_chunk)
from .zvonkin import PdeSolution

__all__ = [
    "DependencyError",
    "BoundReport",
    "KrylovTestFunction",
    "MultiplierPath",
    "exp_moment_rhs",
    "exp_sup_moment_check",
    "krylov_check",
    "shrinking_support_family",
    "fit_krylov_constant",
    "StabilityReport",
    "stability_experiment",
    "HolderReport",
    "holder_experiment",
    "gronwall_multiplier",
    "BetaProcess",
    "beta_constant",
    "beta_clipped_square",
    "khasminskii_check",
    "GronwallHarnessReport",
    "stochastic_gronwall_harness",
    "maximal_function",
    "SmoothTestFunction",
    "smooth_linear_core",
    "gaussian_bump",
    "HardyLittlewoodReport",
    "hardy_littlewood_check",
]


class DependencyError(RuntimeError):
    """A check needs data its inputs do not carry (e.g. gradients)."""


def _prefix_stable(prefixes: Sequence[McEstimate]) -> bool:
    """Nested prefix means must agree with the full estimate within bands."""
    full = prefixes[-1]
    for est in prefixes[:-1]:
        tol = est.confidence_radius + full.confidence_radius
        if abs(est.mean - full.mean) > tol:
            return False
    return True


@dataclass(frozen=True)
class BoundReport:
    """One verified inequality: MC left side against an analytic right side.

    ``rhs`` is ``inf`` for boundedness-only checks whose constant the
    theory leaves unspecified; ``parameters`` then carries the stability
    diagnostics that stand in for an absolute comparison.
    """

    name: str
    lhs: McEstimate
    rhs: float
    parameters: Mapping[str, object] = field(default_factory=dict)

    @property
    def satisfied(self) -> bool:
        lhs_hi = self.lhs.mean + self.lhs.confidence_radius
        return bool(math.isfinite(lhs_hi) and lhs_hi <= self.rhs)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "lhs_mean": self.lhs.mean,
            "lhs_std_error": self.lhs.std_error,
            "lhs_confidence_radius": self.lhs.confidence_radius,
            "n_samples": self.lhs.n_samples,
            "confidence_level": self.lhs.confidence_level,
            "rhs": self.rhs,
            "satisfied": self.satisfied,
            "parameters": {k: _jsonable(v) for k, v in self.parameters.items()},
        }


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (tuple, list)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    return v


# ---------------------------------------------------------------------------
# exponential sup-moment bounds


_ALPHA_DENOM = {"driftless": 2.0, "drift": 4.0, "functional": 8.0}


def exp_moment_rhs(alpha: float, d: int, kappa: float, T: float,
                   initial_value: np.ndarray | float) -> float:
    """Closed-form bound for E exp(alpha sup |M|^2), driftless case."""
    s = 2.0 * alpha * d * kappa * T
    if not 0.0 <= s < 1.0:
        raise ValueError(f"alpha must lie in [0, 1/(2 d kappa T)), got {alpha}")
    x0 = np.asarray(initial_value, float)
    sq = float(np.sum(x0 * x0))
    return 4.0 / math.sqrt(1.0 - s) * math.exp(alpha / (1.0 - s) * sq) - 3.0


def exp_sup_moment_check(ensemble: PathEnsemble, alpha: float, kappa: float,
                         variant: str = "driftless",
                         confidence_level: float = 0.99) -> BoundReport:
    """E exp(alpha sup_{[0,T]} |X|^2) against its admissible range.

    The driftless variant has a closed-form right side evaluated at the
    ensemble's (deterministic) initial value.  The drift and functional
    variants shrink alpha's range (denominators 4 and 8) and report
    boundedness only; the functional variant's theoretical display
    carries the square of the expectation, recorded in parameters as
    ``squared_mean``.
    """
    if variant not in _ALPHA_DENOM:
        raise ValueError(f"unknown variant {variant!r}")
    grid = ensemble.grid
    d, T = grid.d, grid.T
    alpha_max = 1.0 / (_ALPHA_DENOM[variant] * d * kappa * T)
    if not 0.0 <= alpha < alpha_max:
        raise ValueError(
            f"alpha={alpha} outside [0, {alpha_max:.6g}) for variant {variant!r}")

    def payoff(chunk: PathChunk) -> np.ndarray:
        fwd = chunk.values[:, grid.m:, :]
        sup_sq = np.max(np.sum(fwd * fwd, axis=-1), axis=1)
        return np.exp(alpha * sup_sq)

    prefixes = ensemble.prefix_estimates(payoff, confidence_level=confidence_level)
    lhs = prefixes[-1]
    if variant == "driftless":
        x0 = np.asarray(ensemble.config.initial_segment)[-1]
        rhs = exp_moment_rhs(alpha, d, kappa, T, x0)
    else:
        rhs = math.inf
    params = {
        "variant": variant,
        "alpha": alpha,
        "alpha_max": alpha_max,
        "kappa": kappa,
        "T": T,
        "d": d,
        "prefix_means": [e.mean for e in prefixes],
        "stable": _prefix_stable(prefixes),
    }
    if variant == "functional":
        params["squared_mean"] = lhs.mean ** 2
    return BoundReport(name=f"exp-sup-moment-{variant}", lhs=lhs, rhs=rhs,
                       parameters=params)


# ---------------------------------------------------------------------------
# occupation (Krylov) estimates


@dataclass(frozen=True)
class KrylovTestFunction:
    """Nonnegative space-time test function with a known mixed norm."""

    name: str
    d: int
    eval: Callable[[float, np.ndarray], np.ndarray]
    p_prime: float
    q_prime: float
    norm_analytic: float

    def __post_init__(self):
        if not validate_pq(self.d, self.p_prime, self.q_prime, threshold=2):
            gap = self.d / self.p_prime + 2.0 / self.q_prime
            raise ValueError(
                f"d/p' + 2/q' = {gap:g} >= 2; the occupation bound needs "
                "subcritical exponents")
        if self.norm_analytic < 0:
            raise ValueError("norm_analytic must be nonnegative")


def shrinking_support_family(epsilons: Sequence[float], d: int,
                             p_prime: float, q_prime: float,
                             T: float) -> list[KrylovTestFunction]:
    """Indicator bumps on ``|x| <= eps/2`` scaled to constant mixed norm.

    The space norm is eps-independent by construction, so the whole
    family shares the norm ``T^(1/q') * vol(ball of diameter 1)^(1/p')``
    and a single constant must bound every occupation estimate.
    """
    if d == 1:
        vol_unit = 1.0
    elif d == 2:
        vol_unit = math.pi / 4.0
    else:
        raise ValueError("support families cover d in {1, 2}")
    norm = T ** (1.0 / q_prime) * vol_unit ** (1.0 / p_prime)
    fns = []
    for eps in epsilons:
        if eps <= 0:
            raise ValueError("support sizes must be positive")
        height = eps ** (-d / p_prime)

        def ev(t, x, eps=eps, height=height):
            x = np.atleast_2d(np.asarray(x, float))
            inside = np.sum(x * x, axis=-1) <= (eps / 2.0) ** 2
            return np.where(inside, height, 0.0)

        fns.append(KrylovTestFunction(
            name=f"bump-eps={eps:g}", d=d, eval=ev,
            p_prime=p_prime, q_prime=q_prime, norm_analytic=norm))
    return fns


def krylov_check(ensemble: PathEnsemble, f: KrylovTestFunction,
                 constant: Optional[float] = None,
                 check_exponential: bool = True,
                 confidence_level: float = 0.99) -> BoundReport:
    """Occupation integral E int_0^T f(t, X(t)) dt, left-endpoint rule.

    With ``constant`` the report compares against constant * norm;
    without it the right side is open and ``parameters['ratio']`` holds
    the empirical constant lhs/norm for family fitting.  The
    exponential functional E exp(int f) rides along as a stability
    diagnostic (it must stay finite for Novikov-style arguments).
    """
    grid = ensemble.grid
    if f.d != grid.d:
        raise ValueError("test function dimension mismatch")
    times = grid.forward_times()[:-1]

    def occupation(chunk: PathChunk) -> np.ndarray:
        acc = np.zeros(chunk.values.shape[0])
        for k, t in enumerate(times):
            acc += np.asarray(f.eval(t, chunk.values[:, grid.m + k, :]), float)
        return grid.h * acc

    occ_vals = ensemble.collect(occupation)
    prefixes = [McEstimate.from_samples(occ_vals[:max(1, int(round(frac * occ_vals.size)))],
                                        confidence_level)
                for frac in (0.25, 0.5, 1.0)]
    lhs = prefixes[-1]
    rhs = constant * f.norm_analytic if constant is not None else math.inf
    params: dict[str, object] = {
        "test_function": f.name,
        "norm": f.norm_analytic,
        "p_prime": f.p_prime,
        "q_prime": f.q_prime,
        "ratio": (lhs.mean / f.norm_analytic) if f.norm_analytic > 0 else math.inf,
        "ratio_upper": ((lhs.mean + lhs.confidence_radius) / f.norm_analytic)
                        if f.norm_analytic > 0 else math.inf,
        "prefix_means": [e.mean for e in prefixes],
        "stable": _prefix_stable(prefixes),
    }
    if check_exponential:
        exp_vals = np.exp(occ_vals)
        exp_prefixes = [McEstimate.from_samples(
            exp_vals[:max(1, int(round(frac * exp_vals.size)))], confidence_level)
            for frac in (0.25, 0.5, 1.0)]
        params["exp_mean"] = exp_prefixes[-1].mean
        params["exp_prefix_means"] = [e.mean for e in exp_prefixes]
        params["exp_stable"] = _prefix_stable(exp_prefixes)
    return BoundReport(name=f"krylov-{f.name}", lhs=lhs, rhs=rhs, parameters=params)


def fit_krylov_constant(reports: Sequence[BoundReport]) -> float:
    """Smallest constant covering every report: max of upper ratio bounds."""
    if not reports:
        raise ValueError("need at least one report")
    return max(float(r.parameters["ratio_upper"]) for r in reports)


# ---------------------------------------------------------------------------
# stability in the initial segment


@dataclass(frozen=True)
class StabilityReport:
    """Log-log regression of segment-difference moments against epsilon."""

    gamma: float
    epsilons: tuple[float, ...]
    estimates: tuple[McEstimate, ...]
    slope: float
    intercept: float

    @property
    def empirical_constant(self) -> float:
        return math.exp(self.intercept)


def stability_experiment(coeffs: CoefficientSet, grid: TimeGrid,
                         base_segment: np.ndarray, direction: np.ndarray,
                         epsilons: Sequence[float], gamma: float,
                         n_paths: int, master_seed: int,
                         workers: int = 1, chunk_size: int = 4096,
                         confidence_level: float = 0.99) -> StabilityReport:
    """Couple X from x and X-hat from x + eps*v over an epsilon ladder.

    Both runs consume identical Brownian increments, so the difference
    isolates the initial-segment perturbation.  The payoff is the sup
    over the whole stored window of |X - X-hat| raised to gamma; the
    slope of log-mean against log-eps should match gamma for Lipschitz
    coefficients and stay near it in the singular case.
    """
    eps_list = [float(e) for e in epsilons]
    if len(set(eps_list)) < 2:
        raise ValueError("perturbation ladder must contain distinct sizes")
    if any(e <= 0 for e in eps_list):
        raise ValueError("perturbation sizes must be positive")
    base = np.asarray(base_segment, float)
    if base.ndim == 1:
        base = np.broadcast_to(base.reshape(grid.d), (grid.m + 1, grid.d)).copy()
    vdir = np.asarray(direction, float)
    if vdir.ndim == 1:
        vdir = np.broadcast_to(vdir.reshape(grid.d), (grid.m + 1, grid.d)).copy()
    if vdir.shape != base.shape:
        raise ValueError("direction shape must match the segment")

    estimates = []
    for eps in eps_list:
        cfg_a = SimulationConfig(grid=grid, coefficients=coeffs,
                                 initial_segment=base, master_seed=master_seed)
        cfg_b = SimulationConfig(grid=grid, coefficients=coeffs,
                                 initial_segment=base + eps * vdir,
                                 master_seed=master_seed)
        pairs = CoupledPathEnsemble(cfg_a, cfg_b, n_paths,
                                    chunk_size=chunk_size, workers=workers)

        def payoff(a: PathChunk, b: PathChunk) -> np.ndarray:
            diff = a.values - b.values
            sup = np.sqrt(np.max(np.sum(diff * diff, axis=-1), axis=1))
            return sup ** gamma

        estimates.append(pairs.estimate(payoff, confidence_level))
    logs = np.log([max(e.mean, 1e-300) for e in estimates])
    slope, intercept = np.polyfit(np.log(eps_list), logs, 1)
    return StabilityReport(gamma=gamma, epsilons=tuple(eps_list),
                           estimates=tuple(estimates),
                           slope=float(slope), intercept=float(intercept))


# ---------------------------------------------------------------------------
# Hoelder regularity across refinements


@dataclass(frozen=True)
class HolderReport:
    """Median seminorms per resolution and a verdict per exponent."""

    alphas: tuple[float, ...]
    factors: tuple[int, ...]
    step_sizes: tuple[float, ...]
    medians: Mapping[float, tuple[float, ...]]
    ratios: Mapping[float, float]
    verdicts: Mapping[float, str]
    stable_max: float
    diverging_min: float


def _gap_maxima(values: np.ndarray) -> np.ndarray:
    """Per path and gap size, the largest increment magnitude (B, n)."""
    B, rows, d = values.shape
    out = np.empty((B, rows - 1))
    for gap in range(1, rows):
        diff = values[:, gap:, :] - values[:, :-gap, :]
        out[:, gap - 1] = np.sqrt(np.max(np.sum(diff * diff, axis=-1), axis=1))
    return out


def holder_experiment(config: SimulationConfig, alphas: Sequence[float],
                      factors: Sequence[int] = (4, 16), n_paths: int = 256,
                      chunk_size: int = 256, stable_max: float = 1.2,
                      diverging_min: float = 1.5) -> HolderReport:
    """Median paths' Hoelder seminorms on a ladder of grid refinements.

    All resolutions consume aggregated blocks of one fine increment
    stream per path, so the comparison isolates the grid.  A seminorm
    whose median grows by less than ``stable_max`` from the coarsest to
    the finest grid earns "stable"; growth beyond ``diverging_min``
    earns "diverging"; anything between is "inconclusive".
    """
    factors = sorted(set(int(f) for f in factors))
    if len(factors) < 1 or factors[0] < 2:
        raise ValueError("need at least one refinement factor >= 2")
    levels = [1] + factors
    finest = levels[-1]
    if any(finest % f != 0 for f in levels):
        raise ValueError("every factor must divide the finest one")
    g = config.grid
    alphas = tuple(float(a) for a in alphas)

    grids = {}
    inits = {}
    base_seg = np.asarray(config.initial_segment)
    for f in levels:
        grids[f] = TimeGrid(d=g.d, r=g.r, T=g.T, h=g.h / f) if f > 1 else g
        if f == 1:
            inits[f] = base_seg
        else:
            coarse_t = np.arange(base_seg.shape[0], dtype=float)
            fine_t = np.arange(base_seg.shape[0] * f - (f - 1), dtype=float) / f
            inits[f] = np.stack([np.interp(fine_t, coarse_t, base_seg[:, j])
                                 for j in range(g.d)], axis=1)

    coeffs = config.effective_coefficients()
    fine_grid = grids[finest]
    semis = {(a, f): [] for a in alphas for f in levels}
    for lo in range(0, n_paths, chunk_size):
        block = np.arange(lo, min(lo + chunk_size, n_paths))
        fine_inc = np.empty((block.size, fine_grid.n_steps, g.d))
        for row, idx in enumerate(block):
            fine_inc[row] = rng.brownian_increments(config.master_seed, int(idx),
                                                    fine_grid.n_steps, g.d,
                                                    fine_grid.h)
        for f in levels:
            mult = finest // f
            sub = grids[f]
            agg = (fine_inc if mult == 1 else
                   fine_inc.reshape(block.size, sub.n_steps, mult, g.d).sum(axis=2))
            vals = _step_chunk(sub, coeffs, inits[f], agg, False, int(block[0]))
            fwd = vals[:, sub.m:, :]
            gap_max = _gap_maxima(fwd)
            gaps_t = sub.h * np.arange(1, fwd.shape[1])
            for a in alphas:
                semis[(a, f)].extend(np.max(gap_max / gaps_t ** a, axis=1).tolist())

    medians = {a: tuple(float(np.median(semis[(a, f)])) for f in levels)
               for a in alphas}
    ratios = {}
    verdicts = {}
    for a in alphas:
        med = medians[a]
        ratio = med[-1] / med[0] if med[0] > 0 else math.inf
        ratios[a] = float(ratio)
        if ratio <= stable_max:
            verdicts[a] = "stable"
        elif ratio >= diverging_min:
            verdicts[a] = "diverging"
        else:
            verdicts[a] = "inconclusive"
    return HolderReport(alphas=alphas, factors=tuple(levels),
                        step_sizes=tuple(g.h / f for f in levels),
                        medians=medians, ratios=ratios, verdicts=verdicts,
                        stable_max=stable_max, diverging_min=diverging_min)


# ---------------------------------------------------------------------------
# the Gronwall multiplier A(t)


@dataclass(frozen=True)
class MultiplierPath:
    """Running multiplier exponent along one coupled pair."""

    times: np.ndarray
    a_values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, float)
        a = np.asarray(self.a_values, float)
        if t.shape != a.shape:
            raise ValueError("times and values must align")
        if a.size and (a[0] > 1e-12 or np.any(a < -1e-12)):
            raise ValueError("multiplier must start at zero and stay nonnegative")
        if np.any(np.diff(a) < -1e-12):
            raise ValueError("multiplier must be nondecreasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "a_values", a)


def _first_exit_step(values: np.ndarray, m: int, halfwidth: float) -> np.ndarray:
    """First forward index with the state outside the box, else n_steps+1."""
    fwd = values[:, m:, :]
    outside = np.any(np.abs(fwd) > halfwidth, axis=-1)
    hit = outside.any(axis=1)
    first = np.where(hit, outside.argmax(axis=1), fwd.shape[1])
    return first


def gronwall_multiplier(pairs: CoupledPathEnsemble, solution: PdeSolution,
                        coeffs: CoefficientSet, c: float = 1.0,
                        confidence_level: float = 0.99,
                        keep_paths: int = 64
                        ) -> tuple[list[MultiplierPath], BoundReport]:
    """Accumulate the two-term multiplier exponent along coupled pairs.

    Per step the integrand adds |V(s, X_s)| times the Hilbert-Schmidt
    distance of the transform Jacobians divided by |Z(s)|, plus the
    squared distance of Jacobian-times-diffusion divided by |Z(s)|^2,
    both zeroed where Z(s) = 0 (the 0/0 convention) and frozen once a
    pair leaves the PDE box.  The report estimates E exp(A(T)/2), whose
    finiteness the stability proof needs, with ensemble-growth
    stability in the parameters.
    """
    if getattr(solution, "gradient", None) is None:
        raise DependencyError("PDE solution lacks gradient tables")
    grid = pairs.grid
    d = grid.d
    halfwidth = solution.grid.halfwidth
    eye = np.eye(d)
    kept: list[MultiplierPath] = []
    samples = np.empty(pairs.n_paths)
    times = grid.forward_times()
    for a, b in pairs.chunks():
        B = a.values.shape[0]
        exit_a = _first_exit_step(a.values, grid.m, halfwidth)
        exit_b = _first_exit_step(b.values, grid.m, halfwidth)
        tau = np.minimum(np.minimum(exit_a, exit_b), grid.n_steps)
        A = np.zeros((B, grid.n_steps + 1))
        for k in range(grid.n_steps):
            t = times[k]
            alive = k < tau
            xa = a.values[:, grid.m + k, :]
            xb = b.values[:, grid.m + k, :]
            z = xa - xb
            az = np.sqrt(np.sum(z * z, axis=-1))
            nz = az > 0.0
            jac_a = solution.jacobian_at(t, xa)
            jac_b = solution.jacobian_at(t, xb)
            jd = jac_a - jac_b
            jac_dist = np.sqrt(np.sum(jd * jd, axis=(-1, -2)))
            sig_a = np.asarray(coeffs.diffusion.eval(t, xa), float)
            sig_b = np.asarray(coeffs.diffusion.eval(t, xb), float)
            dusig_a = np.einsum("bij,bjk->bik", eye + jac_a, sig_a)
            dusig_b = np.einsum("bij,bjk->bik", eye + jac_b, sig_b)
            dd = dusig_a - dusig_b
            dusig_dist_sq = np.sum(dd * dd, axis=(-1, -2))
            v_vals = np.asarray(coeffs.functional.eval(t, a.segment_block(t), grid.h),
                                float)
            v_norm = np.sqrt(np.sum(v_vals * v_vals, axis=-1))
            safe_az = np.where(nz, az, 1.0)
            term1 = np.where(nz, v_norm * jac_dist / safe_az, 0.0)
            term2 = np.where(nz, dusig_dist_sq / (safe_az * safe_az), 0.0)
            A[:, k + 1] = A[:, k] + np.where(alive, grid.h * c * (term1 + term2), 0.0)
        samples[a.indices - pairs.start_index] = np.exp(0.5 * A[:, -1])
        for row in range(B):
            if len(kept) < keep_paths:
                kept.append(MultiplierPath(times=times.copy(), a_values=A[row].copy()))
    prefixes = [McEstimate.from_samples(samples[:max(1, int(round(f * samples.size)))],
                                        confidence_level)
                for f in (0.25, 0.5, 1.0)]
    lhs = prefixes[-1]
    report = BoundReport(
        name="gronwall-multiplier", lhs=lhs, rhs=math.inf,
        parameters={
            "c": c,
            "prefix_means": [e.mean for e in prefixes],
            "stable": _prefix_stable(prefixes),
            "max_exponent": float(np.max(np.log(np.maximum(samples, 1e-300)))) * 2.0,
        })
    return kept, report


# ---------------------------------------------------------------------------
# Khasminskii-type exponential bounds


@dataclass(frozen=True)
class BetaProcess:
    """Nonnegative adapted rate with an analytic conditional certificate.

    ``alpha_certificate(T)`` returns an analytic alpha with
    E[int_s^t beta du | F_s] <= alpha < 1 for all s <= t <= T; the
    exponential bound 1/(1 - alpha) follows.  Either ``constant`` (a
    deterministic rate) or ``of_brownian`` (a map from scalar Brownian
    paths to rate paths) describes the process itself.
    """

    name: str
    alpha_certificate: Callable[[float], float]
    constant: Optional[float] = None
    of_brownian: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if (self.constant is None) == (self.of_brownian is None):
            raise ValueError("specify exactly one of constant, of_brownian")


def beta_constant(rate: float) -> BetaProcess:
    if rate < 0:
        raise ValueError("rate must be nonnegative")
    return BetaProcess(name=f"constant-{rate:g}",
                       alpha_certificate=lambda T: rate * T,
                       constant=rate)


def beta_clipped_square(scale: float, cap: float) -> BetaProcess:
    """beta(t) = scale * min(W(t)^2, cap); certificate scale*cap*T."""
    if scale < 0 or cap <= 0:
        raise ValueError("need scale >= 0 and cap > 0")

    def ev(times: np.ndarray, w: np.ndarray) -> np.ndarray:
        return scale * np.minimum(w * w, cap)

    return BetaProcess(name=f"clipped-square-{scale:g}x{cap:g}",
                       alpha_certificate=lambda T: scale * cap * T,
                       of_brownian=ev)


def khasminskii_check(beta: BetaProcess, T: float,
                      alpha_bound: Optional[float] = None,
                      n_steps: int = 256, n_paths: int = 20000,
                      master_seed: int = 90210, chunk_size: int = 4096,
                      confidence_level: float = 0.99) -> BoundReport:
    """E exp(int_0^T beta dt) against 1/(1 - alpha).

    Deterministic rates are integrated exactly; Brownian-driven rates
    are sampled with the left-endpoint rule on scalar Brownian paths
    from the engine's counter-based streams.
    """
    alpha = beta.alpha_certificate(T) if alpha_bound is None else float(alpha_bound)
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"certificate alpha={alpha} must lie in [0, 1)")
    rhs = 1.0 / (1.0 - alpha)
    if beta.constant is not None:
        mean = math.exp(beta.constant * T)
        lhs = McEstimate(mean=mean, std_error=0.0, n_samples=1,
                         confidence_level=confidence_level)
        params = {"beta": beta.name, "alpha": alpha, "T": T, "analytic": True}
        return BoundReport(name="khasminskii", lhs=lhs, rhs=rhs, parameters=params)
    h = T / n_steps
    times = h * np.arange(n_steps + 1)
    samples = np.empty(n_paths)
    for lo in range(0, n_paths, chunk_size):
        hi = min(lo + chunk_size, n_paths)
        B = hi - lo
        w = np.zeros((B, n_steps + 1))
        for row, idx in enumerate(range(lo, hi)):
            inc = rng.brownian_increments(master_seed, idx, n_steps, 1, h)
            w[row, 1:] = np.cumsum(inc[:, 0])
        rates = np.asarray(beta.of_brownian(times, w), float)
        samples[lo:hi] = np.exp(h * np.sum(rates[:, :-1], axis=1))
    lhs = McEstimate.from_samples(samples, confidence_level)
    params = {"beta": beta.name, "alpha": alpha, "T": T, "analytic": False,
              "n_steps": n_steps}
    return BoundReport(name="khasminskii", lhs=lhs, rhs=rhs, parameters=params)


# ---------------------------------------------------------------------------
# stochastic Gronwall harness


@dataclass(frozen=True)
class GronwallHarnessReport:
    """Structural checks for the pathwise Gronwall inequality."""

    kind: str
    K: float
    C: float
    p: float
    estimate: McEstimate
    prefix_means: tuple[float, ...]
    stable: bool
    scale_ratio_error: float
    growth_ratio: float
    fitted_rate: Optional[float]


_GRONWALL_KINDS = ("deterministic", "geometric", "drifted")


def _gronwall_paths(kind: str, K: float, C: float, T: float, n_steps: int,
                    master_seed: int, lo: int, hi: int) -> np.ndarray:
    h = T / n_steps
    B = hi - lo
    tgrid = h * np.arange(n_steps + 1)
    if kind == "deterministic":
        return np.broadcast_to(C * np.exp(K * tgrid), (B, n_steps + 1)).copy()
    w = np.zeros((B, n_steps + 1))
    for row, idx in enumerate(range(lo, hi)):
        inc = rng.brownian_increments(master_seed, idx, n_steps, 1, h)
        w[row, 1:] = np.cumsum(inc[:, 0])
    mart = np.exp(w - 0.5 * tgrid) - 1.0  # exponential martingale minus one
    if kind == "geometric":
        return C * (mart + 1.0)
    # drifted: Z_k = K h sum_{j<k} sup_{r<=j} Z_r + C M_k + C, exact hypothesis
    Z = np.empty((B, n_steps + 1))
    Z[:, 0] = C
    run_sup = Z[:, 0].copy()
    acc = np.zeros(B)
    for k in range(n_steps):
        acc += run_sup
        Z[:, k + 1] = K * h * acc + C * mart[:, k + 1] + C
        run_sup = np.maximum(run_sup, Z[:, k + 1])
    return Z


def stochastic_gronwall_harness(kind: str, K: float, C: float, p: float,
                                T: float = 1.0, n_steps: int = 256,
                                n_paths: int = 4096, master_seed: int = 777,
                                chunk_size: int = 4096,
                                scale_factor: float = 2.0,
                                confidence_level: float = 0.99
                                ) -> GronwallHarnessReport:
    """Drive constructions that satisfy the Gronwall hypothesis exactly.

    Generators: ``deterministic`` (the equality case C e^{Kt}),
    ``geometric`` (K = 0, Z = C times an exponential martingale) and
    ``drifted`` (running-sup Riemann term plus a martingale, K > 0).
    The report checks ensemble-growth stability of E[sup Z^p], exact
    C^p scale equivariance (generators are linear in C), and the growth
    ratio when the horizon doubles (step size held fixed).
    """
    if kind not in _GRONWALL_KINDS:
        raise ValueError(f"unknown generator {kind!r}; choose from {_GRONWALL_KINDS}")
    if not 0.0 < p < 1.0:
        raise ValueError("the lemma covers 0 < p < 1")
    if K < 0 or C < 0:
        raise ValueError("K and C must be nonnegative")
    if kind == "geometric" and K != 0.0:
        raise ValueError("the geometric generator realizes the K = 0 hypothesis")

    def sup_p(Zv: np.ndarray) -> np.ndarray:
        return np.max(Zv, axis=1) ** p

    def run(C_run: float, T_run: float, n_run: int) -> np.ndarray:
        out = np.empty(n_paths)
        for lo in range(0, n_paths, chunk_size):
            hi = min(lo + chunk_size, n_paths)
            Zv = _gronwall_paths(kind, K, C_run, T_run, n_run, master_seed, lo, hi)
            out[lo:hi] = sup_p(Zv)
        return out

    base = run(C, T, n_steps)
    prefixes = [McEstimate.from_samples(base[:max(1, int(round(f * n_paths)))],
                                        confidence_level)
                for f in (0.25, 0.5, 1.0)]
    estimate = prefixes[-1]
    scaled = run(scale_factor * C, T, n_steps) if C > 0 else base
    base_mean = estimate.mean
    scaled_mean = float(np.mean(scaled))
    expected = scale_factor ** p * base_mean
    scale_err = abs(scaled_mean - expected) / max(abs(expected), 1e-300)
    longer = run(C, 2.0 * T, 2 * n_steps)
    growth_ratio = float(np.mean(longer)) / max(base_mean, 1e-300)
    fitted_rate = (math.log(growth_ratio) / (K * T)) if K > 0 else None
    return GronwallHarnessReport(
        kind=kind, K=K, C=C, p=p, estimate=estimate,
        prefix_means=tuple(e.mean for e in prefixes),
        stable=_prefix_stable(prefixes),
        scale_ratio_error=float(scale_err),
        growth_ratio=growth_ratio,
        fitted_rate=fitted_rate)


# ---------------------------------------------------------------------------
# Hardy-Littlewood maximal function


def _default_radii(dx: float, width: float) -> list[float]:
    radii = []
    r = dx
    while r <= width + 1e-12:
        radii.append(r)
        r *= math.sqrt(2.0)
    return radii


def maximal_function(phi: np.ndarray, dx: float,
                     radii: Optional[Sequence[float]] = None) -> np.ndarray:
    """Discrete centered maximal function over a radii ladder.

    ``phi`` is a nonnegative sample on a uniform grid (1-D or 2-D) of a
    compactly supported function; cells outside the grid count as zero.
    Each radius r averages over cells whose centers lie within r, and
    the result takes the max over the ladder.  Every operation here is
    monotone in phi (prefix sums, window differences, running max), so
    phi <= psi pointwise gives M phi <= M psi exactly in floats.
    """
    phi = np.asarray(phi, float)
    if np.any(phi < 0):
        raise ValueError("phi must be nonnegative")
    if phi.ndim not in (1, 2):
        raise ValueError("grids of dimension 1 or 2 only")
    if dx <= 0:
        raise ValueError("dx must be positive")
    width = dx * max(phi.shape)
    ladder = list(radii) if radii is not None else _default_radii(dx, width)
    if not ladder:
        raise ValueError("radii ladder must be nonempty")
    cells = sorted(set(int(math.floor(r / dx + 1e-12)) for r in ladder if r > 0))
    if not cells:
        raise ValueError("all radii fall below one cell")
    if phi.ndim == 1:
        return _maximal_1d(phi, cells)
    return _maximal_2d(phi, cells)


def _window_sums_1d(prefix: np.ndarray, m: int, n: int) -> np.ndarray:
    hi = np.minimum(np.arange(n) + m + 1, n)
    lo = np.maximum(np.arange(n) - m, 0)
    return prefix[hi] - prefix[lo]


def _maximal_1d(phi: np.ndarray, cells: Sequence[int]) -> np.ndarray:
    n = phi.shape[0]
    prefix = np.concatenate([[0.0], np.cumsum(phi)])
    out = np.zeros_like(phi)
    for m in cells:
        means = _window_sums_1d(prefix, m, n) / (2 * m + 1)
        out = np.maximum(out, means)
    return out


def _maximal_2d(phi: np.ndarray, cells: Sequence[int]) -> np.ndarray:
    rows, cols = phi.shape
    prefix = np.concatenate([np.zeros((rows, 1)), np.cumsum(phi, axis=1)], axis=1)
    out = np.zeros_like(phi)
    col_idx = np.arange(cols)
    for m in cells:
        total = np.zeros_like(phi)
        count = 0
        for j in range(-m, m + 1):
            k = int(math.floor(math.sqrt(m * m - j * j)))
            count += 2 * k + 1
            hi = np.minimum(col_idx + k + 1, cols)
            lo = np.maximum(col_idx - k, 0)
            src_lo = max(0, -j)
            src_hi = min(rows, rows - j)
            if src_lo >= src_hi:
                continue
            rows_slice = slice(src_lo, src_hi)
            shifted = prefix[src_lo + j:src_hi + j]
            total[rows_slice] += shifted[:, hi] - shifted[:, lo]
        out = np.maximum(out, total / count)
    return out


@dataclass(frozen=True)
class SmoothTestFunction:
    """Scalar function with an analytic gradient, for pointwise checks."""

    name: str
    eval: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]


def smooth_linear_core() -> SmoothTestFunction:
    """Identity on [-1, 1] with a smooth, flattening extension outside."""

    def ev(x):
        x = np.asarray(x, float)
        inner = np.abs(x) <= 1.0
        tail = 1.0 + (1.0 - np.exp(-3.0 * (np.abs(x) - 1.0))) / 3.0
        return np.where(inner, x, np.sign(x) * tail)

    def gr(x):
        x = np.asarray(x, float)
        inner = np.abs(x) <= 1.0
        return np.where(inner, 1.0, np.exp(-3.0 * (np.abs(x) - 1.0)))

    return SmoothTestFunction(name="linear-core", eval=ev, grad=gr)


def gaussian_bump(width: float = 1.0) -> SmoothTestFunction:
    def ev(x):
        x = np.asarray(x, float)
        return np.exp(-x * x / (2.0 * width * width))

    def gr(x):
        x = np.asarray(x, float)
        return -x / (width * width) * np.exp(-x * x / (2.0 * width * width))

    return SmoothTestFunction(name=f"gaussian-{width:g}", eval=ev, grad=gr)


@dataclass(frozen=True)
class HardyLittlewoodReport:
    """Fitted pointwise constant and grid L^p operator ratios."""

    function: str
    fitted_cd: float
    worst_pair: tuple[float, float]
    n_pairs: int
    lp_ratios: Mapping[float, float]


def hardy_littlewood_check(fn: SmoothTestFunction, halfwidth: float = 4.0,
                           nx: int = 2049, n_pairs: int = 4000,
                           seed: int = 515, p_values: Sequence[float] = (2.0, 4.0),
                           radii: Optional[Sequence[float]] = None
                           ) -> HardyLittlewoodReport:
    """Fit the constant in |phi(x)-phi(y)| <= C |x-y| (Mg(x) + Mg(y)).

    g = |grad phi| is sampled on the grid and run through the discrete
    maximal function; pairs are drawn uniformly from the grid.  The
    operator ratios ||M phi||_p / ||phi||_p (computed on |phi|) ride
    along for the L^p half of the statement.
    """
    dx = 2.0 * halfwidth / (nx - 1)
    axis = -halfwidth + dx * np.arange(nx)
    grad_mag = np.abs(np.asarray(fn.grad(axis), float))
    mg = maximal_function(grad_mag, dx, radii)
    phi_vals = np.asarray(fn.eval(axis), float)

    gen = np.random.Generator(np.random.Philox(key=seed))
    ia = gen.integers(0, nx, size=n_pairs)
    ib = gen.integers(0, nx, size=n_pairs)
    keep = ia != ib
    lhs = np.abs(phi_vals[ia] - phi_vals[ib])
    denom = np.abs(axis[ia] - axis[ib]) * (mg[ia] + mg[ib])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(keep & (denom > 0), lhs / np.maximum(denom, 1e-300), 0.0)
    worst = int(np.argmax(ratios))
    fitted = float(ratios[worst])

    abs_phi = np.abs(phi_vals)
    m_phi = maximal_function(abs_phi, dx, radii)
    lp_ratios = {}
    for p in p_values:
        num = (np.sum(m_phi ** p) * dx) ** (1.0 / p)
        den = (np.sum(abs_phi ** p) * dx) ** (1.0 / p)
        lp_ratios[float(p)] = float(num / den) if den > 0 else math.inf
    return HardyLittlewoodReport(function=fn.name, fitted_cd=fitted,
                                 worst_pair=(float(axis[ia[worst]]),
                                             float(axis[ib[worst]])),
                                 n_pairs=int(np.sum(keep)),
                                 lp_ratios=lp_ratios)
