"""Time grids, path containers and path norms.

Everything downstream (simulation, reweighting, PDE transforms, bound
checks) works on a single uniform grid covering the delay window
``[-r, 0]`` and the forecast window ``[0, T]``.  The delay length and the
horizon are coerced to exact multiples of the step, so index arithmetic
never accumulates rounding error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm as _norm_dist

__all__ = [
    "GridAlignmentError",
    "TimeGrid",
    "PathRole",
    "PathSegment",
    "SamplePath",
    "CompactSetSpec",
    "McEstimate",
    "segment_extract",
    "sup_norm",
    "holder_seminorm",
    "validate_pq",
    "compact_membership",
]

#: relative slack used when snapping r and T onto the step lattice
_ALIGN_RTOL = 1e-9


class GridAlignmentError(ValueError):
    """A time does not lie on the grid (or r, T are not step multiples)."""


def _as_index(t: float, h: float, lo: int, hi: int, what: str = "time") -> int:
    """Map a grid time to its integer index, refusing off-grid values."""
    k = round(t / h)
    if abs(k * h - t) > _ALIGN_RTOL * max(1.0, abs(t)):
        raise GridAlignmentError(f"{what} {t!r} is not a multiple of h={h!r}")
    if not lo <= k <= hi:
        raise ValueError(f"{what} {t!r} outside grid range [{lo * h}, {hi * h}]")
    return k


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid with m delay steps on [-r, 0] and n_steps on [0, T].

    Parameters are the state dimension ``d``, delay length ``r``, horizon
    ``T`` and step ``h``.  ``r`` and ``T`` must be integer multiples of
    ``h`` up to a 1e-9 relative slack; the stored values are re-derived
    from the integer counts so that ``m * h == r`` and
    ``n_steps * h == T`` hold exactly.
    """

    d: int
    r: float
    T: float
    h: float
    m: int = field(init=False)
    n_steps: int = field(init=False)

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("state dimension d must be >= 1")
        if self.h <= 0:
            raise ValueError("step h must be positive")
        if self.r < 0 or self.T <= 0:
            raise ValueError("need r >= 0 and T > 0")
        m = round(self.r / self.h)
        n = round(self.T / self.h)
        if abs(m * self.h - self.r) > _ALIGN_RTOL * max(1.0, self.r):
            raise GridAlignmentError(f"r={self.r!r} is not a multiple of h={self.h!r}")
        if n < 1 or abs(n * self.h - self.T) > _ALIGN_RTOL * max(1.0, self.T):
            raise GridAlignmentError(f"T={self.T!r} is not a multiple of h={self.h!r}")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "n_steps", n)
        object.__setattr__(self, "r", m * self.h)
        object.__setattr__(self, "T", n * self.h)

    @property
    def n_times(self) -> int:
        """Number of grid times from -r to T inclusive."""
        return self.m + self.n_steps + 1

    def times(self) -> np.ndarray:
        """All grid times ``-r, ..., 0, ..., T`` (length ``n_times``)."""
        return np.arange(-self.m, self.n_steps + 1) * self.h

    def forward_times(self) -> np.ndarray:
        """Grid times on [0, T]."""
        return np.arange(0, self.n_steps + 1) * self.h

    def index_of(self, t: float) -> int:
        """Array index of grid time ``t`` (0 corresponds to time -r)."""
        return self._as_index_checked(t) + self.m

    def forward_index(self, t: float) -> int:
        """Step index of ``t`` in [0, T] (0 corresponds to time 0)."""
        k = self._as_index_checked(t)
        if k < 0:
            raise ValueError(f"time {t!r} precedes 0")
        return k

    def _as_index_checked(self, t: float) -> int:
        return _as_index(t, self.h, -self.m, self.n_steps)


class PathRole(str, Enum):
    """What a stored path represents."""

    SOLUTION = "solution"
    DRIFTLESS = "driftless"
    TRANSFORMED = "transformed"
    DIFFERENCE = "difference"
    BROWNIAN = "brownian"


def _freeze(values: np.ndarray, rows: int, d: int) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(values, dtype=float))
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.shape != (rows, d):
        raise ValueError(f"values must have shape {(rows, d)}, got {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class PathSegment:
    """One delay segment: values at the m+1 grid times spanning [t-r, t].

    ``base_time`` records the segment's right endpoint ``t`` so that
    time-dependent functionals can report where they were evaluated.
    """

    grid: TimeGrid
    values: np.ndarray
    base_time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "values", _freeze(self.values, self.grid.m + 1, self.grid.d))

    def value_at_offset(self, s: float) -> np.ndarray:
        """State at lag offset ``s`` in [-r, 0]."""
        k = _as_index(s, self.grid.h, -self.grid.m, 0, what="offset")
        return self.values[k + self.grid.m]


@dataclass(frozen=True)
class SamplePath:
    """A path sampled on the whole grid [-r, T], plus its role tag."""

    grid: TimeGrid
    values: np.ndarray
    role: PathRole = PathRole.SOLUTION

    def __post_init__(self):
        object.__setattr__(self, "values", _freeze(self.values, self.grid.n_times, self.grid.d))

    def value_at(self, t: float) -> np.ndarray:
        return self.values[self.grid.index_of(t)]


def segment_extract(path: SamplePath, t: float) -> PathSegment:
    """Slice the delay segment of ``path`` at grid time ``t`` in [0, T].

    The returned segment holds the m+1 samples at times
    ``t - r, ..., t`` and shares memory with the path.
    """
    k = path.grid.forward_index(t)
    window = path.values[k : k + path.grid.m + 1]
    return PathSegment(path.grid, window, base_time=k * path.grid.h)


def sup_norm(segment: PathSegment | np.ndarray) -> float:
    """Largest Euclidean state norm over a segment's samples."""
    values = segment.values if isinstance(segment, PathSegment) else np.asarray(segment, float)
    if values.ndim == 1:
        values = values[:, None]
    return float(np.max(np.sqrt(np.sum(values * values, axis=-1))))


def _holder_on_values(values: np.ndarray, h: float, alpha: float) -> float:
    """Max difference quotient ``|x_j - x_i| / ((j-i) h)^alpha`` over pairs."""
    n = values.shape[0]
    if n < 2:
        return 0.0
    best = 0.0
    for gap in range(1, n):
        diff = values[gap:] - values[:-gap]
        top = float(np.max(np.sqrt(np.sum(diff * diff, axis=-1))))
        q = top / (gap * h) ** alpha
        if q > best:
            best = q
    return best


def holder_seminorm(path: SamplePath | PathSegment, alpha: float,
                    window: Optional[tuple[float, float]] = None) -> float:
    """Empirical alpha-Hoelder seminorm over grid pairs in a time window.

    For a :class:`SamplePath` the window defaults to [0, T]; for a
    :class:`PathSegment` the whole segment is used and ``window`` must be
    omitted.  ``alpha`` must lie in (0, 1].
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    if isinstance(path, PathSegment):
        if window is not None:
            raise ValueError("window not supported for segments")
        return _holder_on_values(np.asarray(path.values, float), path.grid.h, alpha)
    grid = path.grid
    if window is None:
        lo, hi = grid.m, grid.m + grid.n_steps
    else:
        t1, t2 = window
        if t2 <= t1:
            raise ValueError("window must satisfy t1 < t2")
        lo, hi = grid.index_of(t1), grid.index_of(t2)
    return _holder_on_values(np.asarray(path.values[lo : hi + 1], float), grid.h, alpha)


@dataclass(frozen=True)
class CompactSetSpec:
    """Level-n path-space compact set: sup norm plus Hoelder seminorm <= n.

    Optional separate caps on the two summands tighten the set further;
    None leaves only the combined budget active.
    """

    n: float
    sup_bound: Optional[float] = None
    holder_bound: Optional[float] = None
    holder_exponent: float = 0.25

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("level n must be positive")
        if not 0.0 < self.holder_exponent < 1.0:
            raise ValueError("holder exponent must lie in (0, 1)")


def compact_membership(segment: PathSegment, spec: CompactSetSpec) -> bool:
    """True iff the segment lies in the compact set described by ``spec``."""
    s = sup_norm(segment)
    hoel = holder_seminorm(segment, spec.holder_exponent)
    if s + hoel > spec.n:
        return False
    if spec.sup_bound is not None and s > spec.sup_bound:
        return False
    if spec.holder_bound is not None and hoel > spec.holder_bound:
        return False
    return True


def validate_pq(d: int, p: float, q: float, threshold: int = 1) -> bool:
    """Check the strict integrability balance ``d/p + 2/q < threshold``.

    ``threshold`` 1 is the drift-class condition; 2 is the weaker balance
    used for occupation-measure test functions.
    """
    if d < 1:
        raise ValueError("dimension must be >= 1")
    if p <= 1 or q <= 1:
        raise ValueError(f"exponents must exceed 1, got p={p}, q={q}")
    if threshold not in (1, 2):
        raise ValueError(f"threshold must be 1 or 2, got {threshold}")
    return d / p + 2.0 / q < threshold


@dataclass(frozen=True)
class McEstimate:
    """Monte Carlo estimate with standard error and confidence radius."""

    mean: float
    std_error: float
    n_samples: int
    confidence_level: float = 0.99
    confidence_radius: float = field(init=False)

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("need at least one sample")
        if not 0.0 < self.confidence_level < 1.0:
            raise ValueError("confidence level must lie in (0, 1)")
        z = float(_norm_dist.ppf(0.5 + self.confidence_level / 2.0))
        object.__setattr__(self, "confidence_radius", z * self.std_error)

    @staticmethod
    def from_samples(samples: Sequence[float] | np.ndarray,
                     confidence_level: float = 0.99) -> "McEstimate":
        """Estimate from raw per-path samples using exact summation."""
        arr = np.asarray(samples, dtype=float).ravel()
        return McEstimate.from_sums(
            math.fsum(arr.tolist()),
            math.fsum((arr * arr).tolist()),
            arr.size,
            confidence_level,
        )

    @staticmethod
    def from_sums(total: float, total_sq: float, n: int,
                  confidence_level: float = 0.99) -> "McEstimate":
        """Estimate from exact sums of samples and squared samples.

        ``math.fsum`` partials combined this way make every reported
        statistic independent of chunking and iteration order.
        """
        if n < 1:
            raise ValueError("need at least one sample")
        mean = total / n
        if n == 1:
            se = 0.0
        else:
            var = max(0.0, (total_sq - total * total / n) / (n - 1))
            se = math.sqrt(var / n)
        return McEstimate(mean=mean, std_error=se, n_samples=n,
                          confidence_level=confidence_level)
