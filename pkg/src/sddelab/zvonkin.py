"""Drift-removing transform built from a backward parabolic PDE.

``solve_backward_pde`` integrates the terminal-value problem

    d_t v + (1/2) sum_ij (sigma sigma^T)_ij d_i d_j v + b . grad v + f = 0,
    v(T, .) = 0,

on a box, componentwise in f, stepping backward from T with an
unconditionally stable implicit scheme (tridiagonal in d=1, alternating
direction sweeps in d=2).  With f = b the map ``u(t,x) = x + v(t,x)``
straightens the drift: transformed paths ``Y = u(t, X(t))`` lose the
singular drift term, and near the terminal time the correction v is a
spatial contraction, which is what the coupled-pair sandwich checks.

Integrable point singularities in b enter through exact cell averages
(never point samples) when the drift provides them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import solve_banded

from .coefficients import CoefficientSet
from .core import McEstimate, PathRole, SamplePath, TimeGrid
from .engine import PathChunk, PathEnsemble, StoppingKind, StoppingRecord

__all__ = [
    "PdeSolverError",
    "WindowNotFoundError",
    "PdeGrid",
    "PdeSolution",
    "ContractionWindow",
    "solve_backward_pde",
    "lipschitz_profile",
    "contraction_window",
    "transform_path",
    "transform_values",
    "sandwich_check",
    "SandwichReport",
    "ito_residual",
    "EmbeddingReport",
    "embedding_check",
]


class PdeSolverError(RuntimeError):
    """Backward march lost stability; rerun with a smaller time step."""


class WindowNotFoundError(RuntimeError):
    """No candidate window achieved the required contraction."""

    def __init__(self, threshold: float, best: float):
        super().__init__(
            f"no window with grid Lipschitz constant <= {threshold}; "
            f"best slice value {best:.4g}")
        self.threshold = threshold
        self.best = best


@dataclass(frozen=True)
class PdeGrid:
    """Spatial box [-halfwidth, halfwidth]^d and time lattice on [t_start, t_end]."""

    d: int
    halfwidth: float
    nx: int
    t_end: float
    n_time: int
    t_start: float = 0.0

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError("PDE solves support d in {1, 2} only")
        if self.nx < 3:
            raise ValueError("need nx >= 3")
        if self.halfwidth <= 0:
            raise ValueError("halfwidth must be positive")
        if self.n_time < 1 or self.t_end <= self.t_start:
            raise ValueError("need n_time >= 1 and t_end > t_start")

    @property
    def dx(self) -> float:
        return 2.0 * self.halfwidth / (self.nx - 1)

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_time

    def axis(self) -> np.ndarray:
        return -self.halfwidth + self.dx * np.arange(self.nx)

    def times(self) -> np.ndarray:
        return self.t_start + self.dt * np.arange(self.n_time + 1)

    def points(self) -> np.ndarray:
        ax = self.axis()
        if self.d == 1:
            return ax[:, None]
        gx, gy = np.meshgrid(ax, ax, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel()], axis=-1)


def _first_diff(arr: np.ndarray, dx: float, axis: int) -> np.ndarray:
    """Central first difference, one-sided at the boundary."""
    out = np.gradient(arr, dx, axis=axis, edge_order=1)
    return out


def _second_diff(arr: np.ndarray, dx: float, axis: int) -> np.ndarray:
    """Central second difference; boundary copies the adjacent interior value."""
    a = np.moveaxis(arr, axis, 0)
    out = np.empty_like(a)
    out[1:-1] = (a[2:] - 2.0 * a[1:-1] + a[:-2]) / (dx * dx)
    out[0] = out[1]
    out[-1] = out[-2]
    return np.moveaxis(out, 0, axis)


def _tridiag_ab(a: np.ndarray, adv: np.ndarray, dt: float, dx: float,
                boundary: str) -> tuple[np.ndarray, bool]:
    """Banded matrix for (I - dt*(a/2 d_xx + adv d_x)) with boundary rows.

    Returns the ``solve_banded`` layout plus a flag telling the caller to
    zero the boundary right-hand side (Dirichlet rows are identities).
    """
    n = a.shape[0]
    lam = dt * a / (2.0 * dx * dx)
    mu = dt * adv / (2.0 * dx)
    sub = -(lam - mu)
    diag = 1.0 + 2.0 * lam
    sup = -(lam + mu)
    ab = np.zeros((3, n))
    ab[1] = diag
    ab[0, 1:] = sup[:-1]
    ab[2, :-1] = sub[1:]
    if boundary == "dirichlet":
        ab[1, 0] = 1.0
        ab[0, 1] = 0.0
        ab[1, -1] = 1.0
        ab[2, -2] = 0.0
        return ab, True
    if boundary == "neumann":
        # ghost reflection kills the advection term at the wall
        ab[1, 0] = 1.0 + 2.0 * lam[0]
        ab[0, 1] = -2.0 * lam[0]
        ab[1, -1] = 1.0 + 2.0 * lam[-1]
        ab[2, -2] = -2.0 * lam[-1]
        return ab, False
    raise ValueError(f"unknown boundary {boundary!r}")


def _drift_on_axis(coeffs: CoefficientSet, t: float, axis: np.ndarray,
                   dx: float, use_cell_average: bool) -> np.ndarray:
    if use_cell_average and coeffs.drift.cell_average is not None:
        return np.asarray(coeffs.drift.cell_average(t, axis, dx), float)
    return np.asarray(coeffs.drift.eval(t, axis[:, None]), float)


@dataclass(frozen=True)
class PdeSolution:
    """Backward-PDE solution on a grid, with gradient and Hessian tables.

    ``u_tilde`` has shape (n_time+1, nx[, nx], d); ``gradient[..., i, j]``
    holds the spatial derivative of component i in direction j, and
    ``hessian[..., i, j, k]`` the second derivatives.  The drift-removing
    map is ``u(t, x) = x + u_tilde(t, x)``.
    """

    grid: PdeGrid
    u_tilde: np.ndarray
    gradient: np.ndarray
    hessian: np.ndarray
    boundary: str

    @property
    def terminal_time(self) -> float:
        return self.grid.t_end

    def times(self) -> np.ndarray:
        return self.grid.times()

    def in_domain(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        return np.all(np.abs(x) <= self.grid.halfwidth, axis=-1)

    # -- interpolation -----------------------------------------------------

    def _time_bracket(self, t: float) -> tuple[int, int, float]:
        g = self.grid
        if t < g.t_start - 1e-12 or t > g.t_end + 1e-12:
            raise ValueError(f"time {t} outside [{g.t_start}, {g.t_end}]")
        pos = (min(max(t, g.t_start), g.t_end) - g.t_start) / g.dt
        j0 = min(int(math.floor(pos)), g.n_time - 1)
        return j0, j0 + 1, pos - j0

    def _interp_space(self, table: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Bilinear interpolation of a (nx[, nx], ...) table at points x."""
        g = self.grid
        x = np.atleast_2d(np.asarray(x, float))
        pos = (np.clip(x, -g.halfwidth, g.halfwidth) + g.halfwidth) / g.dx
        i0 = np.minimum(pos.astype(int), g.nx - 2)
        w = pos - i0
        if g.d == 1:
            a, b = table[i0[:, 0]], table[i0[:, 0] + 1]
            wx = w[:, 0].reshape((-1,) + (1,) * (table.ndim - 1))
            return (1.0 - wx) * a + wx * b
        ix, iy = i0[:, 0], i0[:, 1]
        wx = w[:, 0].reshape((-1,) + (1,) * (table.ndim - 2))
        wy = w[:, 1].reshape((-1,) + (1,) * (table.ndim - 2))
        v00 = table[ix, iy]
        v10 = table[ix + 1, iy]
        v01 = table[ix, iy + 1]
        v11 = table[ix + 1, iy + 1]
        return ((1 - wx) * (1 - wy) * v00 + wx * (1 - wy) * v10
                + (1 - wx) * wy * v01 + wx * wy * v11)

    def _interp(self, table_all: np.ndarray, t: float, x: np.ndarray) -> np.ndarray:
        j0, j1, w = self._time_bracket(t)
        lo = self._interp_space(table_all[j0], x)
        if w == 0.0:
            return lo
        hi = self._interp_space(table_all[j1], x)
        return (1.0 - w) * lo + w * hi

    def u_tilde_at(self, t: float, x: np.ndarray) -> np.ndarray:
        """Correction term at (t, x); linear in time, bilinear in space."""
        return self._interp(self.u_tilde, t, x)

    def u_at(self, t: float, x: np.ndarray) -> np.ndarray:
        """The transform u(t, x) = x + correction."""
        x = np.atleast_2d(np.asarray(x, float))
        return x + self.u_tilde_at(t, x)

    def jacobian_at(self, t: float, x: np.ndarray) -> np.ndarray:
        """Jacobian of the correction (identity NOT included), (..., d, d)."""
        return self._interp(self.gradient, t, x)

    # -- export ------------------------------------------------------------

    def export_grid_file(self, path: str) -> None:
        """Write the correction table as a plain-text dense grid file.

        Layout: one header line ``d halfwidth nx n_times t_start t_end``,
        then for each time index (ascending) and each component one line
        of ``nx**d`` values, row-major over space, 17 significant digits.
        """
        g = self.grid
        d = g.d
        with open(path, "w") as fh:
            fh.write(f"{d} {g.halfwidth:.17g} {g.nx} {g.n_time + 1} "
                     f"{g.t_start:.17g} {g.t_end:.17g}\n")
            for j in range(g.n_time + 1):
                block = self.u_tilde[j].reshape(-1, d)
                for comp in range(d):
                    fh.write(" ".join(f"{v:.17g}" for v in block[:, comp]))
                    fh.write("\n")


def _check_stable(v: np.ndarray, step: int) -> None:
    mx = float(np.max(np.abs(v)))
    if not math.isfinite(mx) or mx > 1e12:
        raise PdeSolverError(
            f"solution norm {mx:.3g} after {step} backward steps; "
            "reduce the time step or enlarge the domain")


def solve_backward_pde(coeffs: CoefficientSet, grid: PdeGrid,
                       source: Optional[Callable[[float, np.ndarray], np.ndarray]] = None,
                       boundary: str = "dirichlet",
                       use_cell_average: bool = True) -> PdeSolution:
    """March the terminal-value problem backward from t_end.

    ``source`` defaults to the drift itself (the drift-removal case).
    ``boundary`` is ``dirichlet`` (value 0; right for compactly supported
    sources, the correction decays) or ``neumann`` (zero normal
    derivative; right for sources that do not decay inside the box).
    """
    if coeffs.d != grid.d:
        raise ValueError("coefficient dimension does not match the PDE grid")
    if boundary not in ("dirichlet", "neumann"):
        raise ValueError(f"unknown boundary {boundary!r}")
    d = grid.d
    n_slices = grid.n_time + 1
    if d == 1:
        shape = (n_slices, grid.nx, d)
    else:
        shape = (n_slices, grid.nx, grid.nx, d)
    u = np.zeros(shape)
    if d == 1:
        _march_1d(coeffs, grid, source, boundary, use_cell_average, u)
    else:
        _march_2d(coeffs, grid, source, boundary, use_cell_average, u)
    gradient, hessian = _difference_tables(u, grid)
    return PdeSolution(grid=grid, u_tilde=u, gradient=gradient,
                       hessian=hessian, boundary=boundary)


def _march_1d(coeffs, grid, source, boundary, use_cell_average, u) -> None:
    ax = grid.axis()
    dt, dx = grid.dt, grid.dx
    v = u[-1].copy()  # zero terminal slice
    for k in range(grid.n_time):
        t_new = grid.t_end - (k + 1) * dt
        sig = np.asarray(coeffs.diffusion.eval(t_new, ax[:, None]), float)
        a = np.einsum("nij,nij->n", sig, sig)  # (sigma sigma^T)_{11} in d=1
        b_vals = _drift_on_axis(coeffs, t_new, ax, dx, use_cell_average)
        f_vals = (np.asarray(source(t_new, ax[:, None]), float)
                  if source is not None else b_vals)
        ab, zero_bdry = _tridiag_ab(a, b_vals[:, 0], dt, dx, boundary)
        rhs = v + dt * f_vals
        if zero_bdry:
            rhs[0] = 0.0
            rhs[-1] = 0.0
        v = solve_banded((1, 1), ab, rhs)
        _check_stable(v, k + 1)
        u[grid.n_time - 1 - k] = v


def _march_2d(coeffs, grid, source, boundary, use_cell_average, u) -> None:
    ax = grid.axis()
    nx = grid.nx
    dt, dx = grid.dt, grid.dx
    pts = grid.points()
    d = 2
    v = u[-1].copy()
    for k in range(grid.n_time):
        t_new = grid.t_end - (k + 1) * dt
        sig = np.asarray(coeffs.diffusion.eval(t_new, pts), float)
        a_full = np.einsum("nij,nkj->nik", sig, sig).reshape(nx, nx, d, d)
        a11, a22 = a_full[..., 0, 0], a_full[..., 1, 1]
        a12 = a_full[..., 0, 1]
        b_vals = np.asarray(coeffs.drift.eval(t_new, pts), float).reshape(nx, nx, d)
        f_vals = (np.asarray(source(t_new, pts), float).reshape(nx, nx, d)
                  if source is not None else b_vals)

        def ax_op(w, a_diag=a11, adv=b_vals[..., 0]):
            return (0.5 * a_diag[..., None] * _second_diff(w, dx, 0)
                    + adv[..., None] * _first_diff(w, dx, 0))

        def ay_op(w, a_diag=a22, adv=b_vals[..., 1]):
            return (0.5 * a_diag[..., None] * _second_diff(w, dx, 1)
                    + adv[..., None] * _first_diff(w, dx, 1))

        mixed = a12[..., None] * _first_diff(_first_diff(v, dx, 0), dx, 1)
        axv = ax_op(v)
        ayv = ay_op(v)
        y0 = v + dt * (axv + ayv + mixed + f_vals)

        # x sweep: (I - dt A_x) y1 = y0 - dt A_x v
        y1 = np.empty_like(v)
        rhs_x = y0 - dt * axv
        for j in range(nx):
            ab, zero_bdry = _tridiag_ab(a11[:, j], b_vals[:, j, 0], dt, dx, boundary)
            col = rhs_x[:, j, :].copy()
            if zero_bdry:
                col[0] = 0.0
                col[-1] = 0.0
            y1[:, j, :] = solve_banded((1, 1), ab, col)
        # y sweep: (I - dt A_y) y2 = y1 - dt A_y v
        y2 = np.empty_like(v)
        rhs_y = y1 - dt * ayv
        for i in range(nx):
            ab, zero_bdry = _tridiag_ab(a22[i, :], b_vals[i, :, 1], dt, dx, boundary)
            row = rhs_y[i, :, :].copy()
            if zero_bdry:
                row[0] = 0.0
                row[-1] = 0.0
            y2[i, :, :] = solve_banded((1, 1), ab, row)
        if boundary == "dirichlet":
            y2[0, :, :] = 0.0
            y2[-1, :, :] = 0.0
            y2[:, 0, :] = 0.0
            y2[:, -1, :] = 0.0
        v = y2
        _check_stable(v, k + 1)
        u[grid.n_time - 1 - k] = v


def _difference_tables(u: np.ndarray, grid: PdeGrid) -> tuple[np.ndarray, np.ndarray]:
    """Gradient (..., d, d) and Hessian (..., d, d, d) by centered differences."""
    d = grid.d
    dx = grid.dx
    space_axes = list(range(1, 1 + d))
    grads = [ _first_diff(u, dx, axis) for axis in space_axes ]
    gradient = np.stack(grads, axis=-1)          # (..., comp, direction)
    hess_cols = []
    for j, axis in enumerate(space_axes):
        hess_cols.append(np.stack(
            [_first_diff(grads[j], dx, ax2) if ax2 != axis else _second_diff(u, dx, axis)
             for ax2 in space_axes], axis=-1))
    hessian = np.stack(hess_cols, axis=-2)       # (..., comp, j, k)
    return gradient, hessian


# ---------------------------------------------------------------------------
# contraction window


def lipschitz_profile(solution: PdeSolution) -> tuple[np.ndarray, np.ndarray]:
    """Per-slice grid Lipschitz constant of the correction term.

    In d=1 the adjacent-pair difference quotient is exact for the linear
    interpolant; in d=2 the spectral norm of the centered-difference
    Jacobian is the grid surrogate.
    """
    g = solution.grid
    u = solution.u_tilde
    if g.d == 1:
        diff = np.diff(u, axis=1) / g.dx
        lips = np.sqrt(np.sum(diff * diff, axis=-1)).max(axis=1)
    else:
        jac = solution.gradient
        svals = np.linalg.svd(jac.reshape(u.shape[0], -1, g.d, g.d),
                              compute_uv=False)
        lips = svals[..., 0].max(axis=1)
    return solution.times(), lips


@dataclass(frozen=True)
class ContractionWindow:
    """Certified window [T - delta, T] of spatial contraction."""

    delta: float
    achieved_lipschitz: float
    threshold: float
    horizons: tuple[float, ...]


def contraction_window(solutions: PdeSolution | Sequence[PdeSolution],
                       threshold: float = 0.5,
                       ladder: Optional[Sequence[float]] = None) -> ContractionWindow:
    """Largest window length delta working for every solution in the family.

    For each candidate delta (default: every time-lattice multiple of the
    shortest solution) every grid slice within ``[t_end - delta, t_end]``
    of every solution must have Lipschitz constant <= threshold.
    """
    if isinstance(solutions, PdeSolution):
        solutions = [solutions]
    if not solutions:
        raise ValueError("need at least one solution")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    profiles = []
    for sol in solutions:
        times, lips = lipschitz_profile(sol)
        profiles.append((sol.grid.t_end, times, lips))
    if ladder is None:
        finest = min(sol.grid.dt for sol in solutions)
        max_span = min(sol.grid.t_end - sol.grid.t_start for sol in solutions)
        n = int(round(max_span / finest))
        ladder = [k * finest for k in range(1, n + 1)]
    ladder = sorted(set(float(x) for x in ladder))
    best_delta = None
    achieved = 0.0
    for delta in ladder:
        worst = 0.0
        for t_end, times, lips in profiles:
            mask = times >= t_end - delta - 1e-12
            worst = max(worst, float(lips[mask].max()))
        if worst <= threshold:
            best_delta = delta
            achieved = worst
        else:
            break
    if best_delta is None:
        terminal_best = max(float(lips[-2:].max()) for _, _, lips in profiles)
        raise WindowNotFoundError(threshold, terminal_best)
    return ContractionWindow(delta=best_delta, achieved_lipschitz=achieved,
                             threshold=threshold,
                             horizons=tuple(sol.grid.t_end for sol in solutions))


# ---------------------------------------------------------------------------
# path transform


def transform_values(grid: TimeGrid, values: np.ndarray,
                     solution: PdeSolution) -> tuple[np.ndarray, np.ndarray]:
    """Apply Y = x + correction to a chunk of paths on [t_start, t_end].

    Returns transformed values plus, per path, the first forward step
    index at which the path left the PDE box (n_steps + 1 when it never
    did).  Values after an exit are frozen at the exit-time transform.
    """
    g = solution.grid
    B = values.shape[0]
    out = np.array(values, dtype=float, copy=True)
    exit_step = np.full(B, grid.n_steps + 1, dtype=int)
    frozen = np.zeros((B, grid.d))
    for k in range(grid.n_steps + 1):
        t = k * grid.h
        if t < g.t_start - 1e-12 or t > g.t_end + 1e-12:
            continue
        col = grid.m + k
        states = values[:, col, :]
        alive = exit_step > k
        outside = ~solution.in_domain(states) & alive
        if np.any(outside):
            exit_step[outside] = k
        corr = solution.u_tilde_at(t, states)
        active = exit_step > k
        out[:, col, :] = np.where(active[:, None], states + corr, frozen)
        just_exited = exit_step == k
        if np.any(just_exited):
            frozen[just_exited] = out[just_exited, col - 1, :] if k > 0 else states[just_exited]
            out[just_exited, col, :] = frozen[just_exited]
    return out, exit_step


def transform_path(path: SamplePath, solution: PdeSolution
                   ) -> tuple[SamplePath, StoppingRecord]:
    """Y(t) = u(t, X(t)) on the overlap of the path grid and PDE window.

    History values (t < 0) are carried over untransformed.  If the path
    leaves the PDE box the transform freezes there and the stopping
    record reports the exit.
    """
    out, exit_step = transform_values(path.grid, path.values[None, :, :], solution)
    y = SamplePath(path.grid, out[0], role=PathRole.TRANSFORMED)
    if exit_step[0] <= path.grid.n_steps:
        rec = StoppingRecord(StoppingKind.DOMAIN_EXIT,
                             exit_step[0] * path.grid.h,
                             solution.grid.halfwidth)
    else:
        rec = StoppingRecord(StoppingKind.HORIZON, path.grid.T,
                             solution.grid.halfwidth)
    return y, rec


@dataclass(frozen=True)
class SandwichReport:
    """Coupled-pair comparison of |Z| = |X - Xhat| against |Y - Yhat|."""

    n_pairs: int
    n_times: int
    n_checked: int
    n_failures: int
    fraction_ok: float
    worst_lower: float
    worst_upper: float
    window: ContractionWindow


def sandwich_check(pairs, solution: PdeSolution, window: ContractionWindow,
                   rtol: float = 1e-9) -> SandwichReport:
    """Verify |Y - Yhat|/2 <= |X - Xhat| <= 3|Y - Yhat|/2 on the window.

    ``pairs`` is a :class:`~sddelab.engine.CoupledPathEnsemble`.  Checked
    at every path grid time inside the certified window; pairs that left
    the PDE box are excluded from that time onward.  Zero differences on
    both sides count as satisfied.
    """
    grid = pairs.grid
    t_lo = window.horizons[0] - window.delta
    cols = [k for k in range(grid.n_steps + 1)
            if k * grid.h >= t_lo - 1e-12 and k * grid.h <= solution.grid.t_end + 1e-12]
    n_checked = 0
    n_failures = 0
    worst_lower = math.inf   # min of |Z| / (|Ztilde|/2)   (>= 1 is good)
    worst_upper = math.inf   # min of (3|Ztilde|/2) / |Z|  (>= 1 is good)
    n_pairs = 0
    for a, b in pairs.chunks():
        ya, exit_a = transform_values(grid, a.values, solution)
        yb, exit_b = transform_values(grid, b.values, solution)
        n_pairs += a.values.shape[0]
        for k in cols:
            col = grid.m + k
            alive = (exit_a > k) & (exit_b > k)
            if not np.any(alive):
                continue
            z = a.values[alive, col, :] - b.values[alive, col, :]
            zt = ya[alive, col, :] - yb[alive, col, :]
            az = np.sqrt(np.sum(z * z, axis=-1))
            azt = np.sqrt(np.sum(zt * zt, axis=-1))
            scale = np.maximum(az, azt)
            slack = rtol * np.maximum(scale, 1e-300)
            lower_ok = 0.5 * azt <= az + slack
            upper_ok = az <= 1.5 * azt + slack
            n_checked += int(az.size)
            n_failures += int(np.sum(~(lower_ok & upper_ok)))
            nz = scale > 0
            if np.any(nz):
                worst_lower = min(worst_lower,
                                  float(np.min(az[nz] / np.maximum(0.5 * azt[nz], 1e-300))))
                worst_upper = min(worst_upper,
                                  float(np.min(1.5 * azt[nz] / np.maximum(az[nz], 1e-300))))
    frac = 1.0 if n_checked == 0 else 1.0 - n_failures / n_checked
    return SandwichReport(n_pairs=n_pairs, n_times=len(cols), n_checked=n_checked,
                          n_failures=n_failures, fraction_ok=frac,
                          worst_lower=worst_lower, worst_upper=worst_upper,
                          window=window)


# ---------------------------------------------------------------------------
# Ito residual


def ito_residual(ensemble: PathEnsemble, solution: PdeSolution,
                 coeffs: CoefficientSet, checkpoints: Sequence[float],
                 confidence_level: float = 0.99) -> dict[float, list[McEstimate]]:
    """Mean residual Y(t) - Y(0) - int_0^t (I + D corr) sigma dW at checkpoints.

    For the drift-removal solution the compensator cancels the drift, so
    each component's residual mean should vanish within MC plus
    time-discretization tolerance.  Intended for ensembles whose delay
    functional is zero (the transform knows nothing about V).
    """
    grid = ensemble.grid
    cols = {t: grid.forward_index(t) for t in checkpoints}
    d = grid.d
    samples = {t: np.empty((ensemble.n_paths, d)) for t in checkpoints}
    eye = np.eye(d)
    for chunk in ensemble.chunks():
        B = chunk.values.shape[0]
        y, _ = transform_values(grid, chunk.values, solution)
        y0 = y[:, grid.m, :]
        stoch = np.zeros((B, d))
        done = {t: False for t in checkpoints}
        for k in range(grid.n_steps + 1):
            for t, c in cols.items():
                if k == c and not done[t]:
                    resid = y[:, grid.m + k, :] - y0 - stoch
                    samples[t][chunk.indices - ensemble.start_index] = resid
                    done[t] = True
            if k == grid.n_steps:
                break
            tk = k * grid.h
            states = chunk.values[:, grid.m + k, :]
            jac = eye + solution.jacobian_at(tk, states)
            sig = np.asarray(coeffs.diffusion.eval(tk, states), float)
            stoch = stoch + np.einsum("bij,bjk,bk->bi", jac, sig,
                                      chunk.increments[:, k, :])
    return {t: [McEstimate.from_samples(samples[t][:, j], confidence_level)
                for j in range(d)]
            for t in checkpoints}


# ---------------------------------------------------------------------------
# embedding surrogates


@dataclass(frozen=True)
class EmbeddingReport:
    """Grid surrogates of the parabolic-space norms and fitted constants.

    ``n_time_holder`` and ``n_sup_holder`` are the smallest constants
    making the two gradient displays hold on the sampled triples; they
    are empirical fixtures, not asserted values.
    """

    p: float
    q: float
    epsilon: float
    delta_exp: float
    h_norm: float
    dt_norm: float
    n_time_holder: float
    n_sup_holder: float
    n_samples: int
    source_norm: Optional[float] = None

    @property
    def pde_bound_ratio(self) -> Optional[float]:
        """Empirical (||u|| + ||d_t u||) / ||f|| when the source norm is known."""
        if self.source_norm is None or self.source_norm == 0.0:
            return None
        return (self.h_norm + self.dt_norm) / self.source_norm


def embedding_check(solution: PdeSolution, p: float, q: float,
                    epsilon: Optional[float] = None,
                    delta_exp: Optional[float] = None,
                    n_samples: int = 4096, seed: int = 20240,
                    source_norm: Optional[float] = None) -> EmbeddingReport:
    """Fit constants for the gradient Hoelder displays on sampled triples.

    Requires the strict balance d/p + 2/q < 1 (the gradient variant's
    hypothesis).  Norm surrogates use the grid quadrature
    ``(sum (|u|^p + |Du|^p + |D^2 u|^p) dx^d)^(1/p)`` per slice and a
    rectangle rule with exponent q in time; the time derivative is the
    forward difference of slices.
    """
    g = solution.grid
    d = g.d
    gap = 1.0 - d / p - 2.0 / q
    if gap <= 0.0:
        raise ValueError(f"need d/p + 2/q < 1, got {d / p + 2.0 / q:.4g}")
    if epsilon is None:
        epsilon = 0.5 * gap
    if not 0.0 < epsilon < gap:
        raise ValueError("epsilon must lie in (0, 1 - d/p - 2/q)")
    if delta_exp is None:
        delta_exp = epsilon / 2.0
    u = solution.u_tilde
    grad = solution.gradient
    hess = solution.hessian
    n_slices = u.shape[0]
    cell = g.dx ** d
    flat = (n_slices, -1)
    u_mag = np.sqrt(np.sum(u.reshape(flat + (d,)) ** 2, axis=-1))
    g_mag = np.sqrt(np.sum(grad.reshape(flat + (d, d)) ** 2, axis=(-1, -2)))
    h_mag = np.sqrt(np.sum(hess.reshape(flat + (d, d, d)) ** 2, axis=(-1, -2, -3)))
    w_slice = (np.sum(u_mag ** p + g_mag ** p + h_mag ** p, axis=1) * cell) ** (1.0 / p)
    h_norm = float((np.sum(w_slice ** q) * g.dt) ** (1.0 / q))
    dtu = np.diff(u, axis=0) / g.dt
    dtu_mag = np.sqrt(np.sum(dtu.reshape((n_slices - 1, -1, d)) ** 2, axis=-1))
    dt_slice = (np.sum(dtu_mag ** p, axis=1) * cell) ** (1.0 / p)
    dt_norm = float((np.sum(dt_slice ** q) * g.dt) ** (1.0 / q))

    T_len = g.t_end - g.t_start
    rng_local = np.random.Generator(np.random.Philox(key=seed))
    n_space = u_mag.shape[1]
    jac_flat = grad.reshape(flat + (d, d))

    # display 1: gradient Hoelder in time at fixed x
    j1 = rng_local.integers(0, n_slices, size=n_samples)
    j2 = rng_local.integers(0, n_slices, size=n_samples)
    ix = rng_local.integers(0, n_space, size=n_samples)
    keep = j1 != j2
    dt_gap = np.abs(j1 - j2) * g.dt
    diff = jac_flat[j1, ix] - jac_flat[j2, ix]
    lhs1 = np.sqrt(np.sum(diff * diff, axis=(-1, -2)))
    denom1 = (dt_gap ** delta_exp
              * h_norm ** (1.0 - 1.0 / q - epsilon / 2.0)
              * dt_norm ** (1.0 / q + epsilon / 2.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios1 = np.where(keep & (denom1 > 0), lhs1 / np.maximum(denom1, 1e-300), 0.0)
    n1 = float(np.max(ratios1)) if ratios1.size else 0.0

    # display 2: sup plus spatial Hoelder quotient at fixed t
    if d == 1:
        coords = solution.grid.axis()[:, None]
    else:
        coords = solution.grid.points()
    jt = rng_local.integers(0, n_slices, size=n_samples)
    ia = rng_local.integers(0, n_space, size=n_samples)
    ib = rng_local.integers(0, n_space, size=n_samples)
    keep2 = ia != ib
    jac_a = jac_flat[jt, ia]
    jac_b = jac_flat[jt, ib]
    mag_a = np.sqrt(np.sum(jac_a * jac_a, axis=(-1, -2)))
    dj = jac_a - jac_b
    num = np.sqrt(np.sum(dj * dj, axis=(-1, -2)))
    dist = np.sqrt(np.sum((coords[ia] - coords[ib]) ** 2, axis=-1))
    lhs2 = mag_a + np.where(keep2, num / np.maximum(dist, 1e-300) ** epsilon, 0.0)
    rhs2 = T_len ** (-1.0 / q) * (h_norm + T_len * dt_norm)
    n2 = float(np.max(lhs2) / rhs2) if rhs2 > 0 else 0.0

    return EmbeddingReport(p=p, q=q, epsilon=float(epsilon),
                           delta_exp=float(delta_exp), h_norm=h_norm,
                           dt_norm=dt_norm, n_time_holder=n1, n_sup_holder=n2,
                           n_samples=n_samples, source_norm=source_norm)
