"""Coefficient specifications and the built-in catalog.

A coefficient set bundles a point drift ``b(t, x)``, a diffusion matrix
``sigma(t, x)`` and a delay functional ``V(t, x_segment)``.  Evaluators
are vectorized over leading axes: drifts map ``(t, (..., d))`` to
``(..., d)``, diffusions to ``(..., d, d)``, and functionals map a block
of segments ``(..., m+1, d)`` (plus the step ``h``) to ``(..., d)``.

Catalog entries are addressable by string id so that experiment configs
can name them; each carries whatever closed forms it has (space-time
integral norms, cell averages over grid cells) for cross-checks against
the numerical routines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import PathSegment, sup_norm, validate_pq

__all__ = [
    "IntegrationError",
    "DriftSpec",
    "DiffusionSpec",
    "FunctionalDriftSpec",
    "CoefficientSet",
    "make_drift",
    "make_diffusion",
    "make_functional",
    "make_coefficients",
    "catalog_ids",
    "lqp_norm_numeric",
    "ellipticity_probe",
    "sublinearity_probe",
    "EllipticityReport",
    "SublinearityReport",
]


class IntegrationError(RuntimeError):
    """Numerical space-time norm did not capture the integrand's support."""


@dataclass
class DriftSpec:
    """Point drift ``b(t, x)`` with its declared integrability exponents.

    ``claims_lqp`` marks entries asserting the strict balance
    ``d/p + 2/q < 1`` (checked when the spec joins a coefficient set).
    ``lqp_norm_analytic`` maps a horizon T to the closed-form space-time
    norm when one exists.  ``cell_average`` (d=1 entries) returns exact
    averages of ``b`` over grid cells, used by the PDE solver so that an
    integrable singularity is never sampled pointwise.
    """

    name: str
    eval: Callable[[float, np.ndarray], np.ndarray]
    p: float
    q: float
    singular: bool = False
    claims_lqp: bool = False
    lqp_norm_analytic: Optional[Callable[[float], float]] = None
    cell_average: Optional[Callable[[float, np.ndarray, float], np.ndarray]] = None

    def __post_init__(self):
        if self.p <= 1 or self.q <= 1:
            raise ValueError("integrability exponents must exceed 1")


@dataclass
class DiffusionSpec:
    """Diffusion matrix ``sigma(t, x)`` with two-sided ellipticity level.

    ``kappa`` bounds the spectrum of ``sigma sigma^T`` into
    ``[1/kappa, kappa]``.  ``grad_integrable`` is declared metadata for
    the local integrability of the spatial gradient; the package records
    it but has no numerical certificate for it.
    """

    name: str
    eval: Callable[[float, np.ndarray], np.ndarray]
    kappa: float
    space_independent: bool = False
    grad_integrable: bool = True

    def __post_init__(self):
        if self.kappa < 1.0:
            raise ValueError("kappa must be >= 1 (two-sided spectral bound)")


@dataclass
class FunctionalDriftSpec:
    """Delay functional ``V(t, segment)`` with growth and Lipschitz data.

    ``eval(t, segvals, h)`` receives segment values of shape
    ``(..., m+1, d)`` and the grid step.  ``growth_g`` dominates the
    functional: ``|V(t, x)| <= growth_g(sup-norm of x)``.
    """

    name: str
    eval: Callable[[float, np.ndarray, float], np.ndarray]
    growth_g: Callable[[float], float]
    lipschitz_K: Optional[float] = None


@dataclass
class CoefficientSet:
    """Drift, diffusion and delay functional in dimension ``d``."""

    d: int
    drift: DriftSpec
    diffusion: DiffusionSpec
    functional: FunctionalDriftSpec

    def __post_init__(self):
        probe = np.zeros((2, self.d))
        b = np.asarray(self.drift.eval(0.0, probe))
        if b.shape != (2, self.d):
            raise ValueError(f"drift output shape {b.shape} != {(2, self.d)}")
        s = np.asarray(self.diffusion.eval(0.0, probe))
        if s.shape != (2, self.d, self.d):
            raise ValueError(f"diffusion output shape {s.shape} != {(2, self.d, self.d)}")
        seg = np.zeros((2, 3, self.d))
        v = np.asarray(self.functional.eval(0.0, seg, 1.0))
        if v.shape != (2, self.d):
            raise ValueError(f"functional output shape {v.shape} != {(2, self.d)}")
        if self.drift.claims_lqp and not validate_pq(self.d, self.drift.p, self.drift.q, 1):
            raise ValueError(
                f"drift '{self.drift.name}' claims d/p + 2/q < 1 but "
                f"d={self.d}, p={self.drift.p}, q={self.drift.q} violate it")


# ---------------------------------------------------------------------------
# catalog


def _zero_drift(d: int) -> DriftSpec:
    return DriftSpec(
        name="zero",
        eval=lambda t, x: np.zeros_like(np.asarray(x, float)),
        p=4.0, q=4.0, claims_lqp=True,
        lqp_norm_analytic=lambda T: 0.0,
        cell_average=(lambda t, centers, dx:
                      np.zeros((np.asarray(centers).shape[0], d))) if d == 1 else None,
    )


def _constant_drift(d: int, value: Sequence[float]) -> DriftSpec:
    vec = np.asarray(value, dtype=float).reshape(d)

    def ev(t, x):
        x = np.asarray(x, float)
        return np.broadcast_to(vec, x.shape).copy()

    ca = None
    if d == 1:
        def ca(t, centers, dx):
            return np.broadcast_to(vec, (np.asarray(centers).shape[0], 1)).copy()

    return DriftSpec(name="constant", eval=ev, p=4.0, q=4.0, cell_average=ca)


def _ou_drift(d: int, theta: float = 1.0) -> DriftSpec:
    def ev(t, x):
        return -theta * np.asarray(x, float)

    ca = None
    if d == 1:
        def ca(t, centers, dx):
            return -theta * np.asarray(centers, float)[:, None]

    return DriftSpec(name="ou", eval=ev, p=4.0, q=4.0, cell_average=ca)


def _singular_cell_mass(lo: np.ndarray, hi: np.ndarray, beta: float) -> np.ndarray:
    """Exact integral of |x|^(-beta) 1_{|x| <= 1} over [lo, hi] intervals."""
    lo = np.minimum(np.maximum(lo, -1.0), 1.0)
    hi = np.minimum(np.maximum(hi, -1.0), 1.0)

    def prim(x):
        # antiderivative of |x|^(-beta) on each sign branch, 0 at 0
        return np.sign(x) * np.abs(x) ** (1.0 - beta) / (1.0 - beta)

    return prim(hi) - prim(lo)


def _singular_drift(d: int, beta: float = 0.2, strength: float = 1.0,
                    p: float = 4.0, q: float = 4.0) -> DriftSpec:
    if not 0.0 < beta * p < float(d):
        raise ValueError(f"need 0 < beta*p < d for local integrability, got beta={beta}, p={p}")

    def ev(t, x):
        x = np.asarray(x, float)
        rad = np.sqrt(np.sum(x * x, axis=-1))
        with np.errstate(divide="ignore"):
            mag = np.where((rad > 0.0) & (rad <= 1.0), strength * rad ** (-beta), 0.0)
        out = np.zeros_like(x)
        out[..., 0] = mag
        return out

    if d == 1:
        space = (2.0 / (1.0 - beta * p)) ** (1.0 / p)
    elif d == 2:
        space = (2.0 * math.pi / (2.0 - beta * p)) ** (1.0 / p)
    else:
        space = None

    analytic = None
    if space is not None:
        analytic = lambda T, s=space: strength * T ** (1.0 / q) * s

    ca = None
    if d == 1:
        def ca(t, centers, dx):
            c = np.asarray(centers, float)
            mass = _singular_cell_mass(c - dx / 2.0, c + dx / 2.0, beta)
            return (strength * mass / dx)[:, None]

    return DriftSpec(name="singular", eval=ev, p=p, q=q, singular=True,
                     claims_lqp=True, lqp_norm_analytic=analytic, cell_average=ca)


def _box_drift(d: int) -> DriftSpec:
    def ev(t, x):
        x = np.asarray(x, float)
        inside = np.all((x >= 0.0) & (x <= 1.0), axis=-1)
        out = np.zeros_like(x)
        out[..., 0] = np.where(inside & (0.0 <= t <= 1.0), 1.0, 0.0)
        return out

    ca = None
    if d == 1:
        def ca(t, centers, dx):
            if not 0.0 <= t <= 1.0:
                return np.zeros((np.asarray(centers).shape[0], 1))
            c = np.asarray(centers, float)
            lo = np.clip(c - dx / 2.0, 0.0, 1.0)
            hi = np.clip(c + dx / 2.0, 0.0, 1.0)
            return ((hi - lo) / dx)[:, None]

    return DriftSpec(name="box", eval=ev, p=4.0, q=4.0, claims_lqp=True,
                     lqp_norm_analytic=lambda T: min(T, 1.0) ** 0.25,
                     cell_average=ca)


def _identity_diffusion(d: int, scale: float = 1.0) -> DiffusionSpec:
    if scale <= 0:
        raise ValueError("scale must be positive")
    eye = scale * np.eye(d)

    def ev(t, x):
        x = np.asarray(x, float)
        return np.broadcast_to(eye, x.shape[:-1] + (d, d)).copy()

    kappa = max(scale * scale, 1.0 / (scale * scale))
    return DiffusionSpec(name="identity", eval=ev, kappa=kappa, space_independent=True)


def _diag_diffusion(d: int, diag: Sequence[float]) -> DiffusionSpec:
    vals = np.asarray(diag, dtype=float).reshape(d)
    if np.any(vals <= 0):
        raise ValueError("diagonal entries must be positive")
    mat = np.diag(vals)

    def ev(t, x):
        x = np.asarray(x, float)
        return np.broadcast_to(mat, x.shape[:-1] + (d, d)).copy()

    kappa = float(max(np.max(vals * vals), np.max(1.0 / (vals * vals))))
    return DiffusionSpec(name="diag", eval=ev, kappa=kappa, space_independent=True)


def _sqrt_bump_diffusion(d: int) -> DiffusionSpec:
    """Uniformly continuous, non-Lipschitz scalar diffusion 1 + min(|x|^(1/2), 1)."""

    def ev(t, x):
        x = np.asarray(x, float)
        rad = np.sqrt(np.sum(x * x, axis=-1))
        s = 1.0 + np.minimum(np.sqrt(rad), 1.0)
        return s[..., None, None] * np.eye(d)

    return DiffusionSpec(name="sqrt_bump", eval=ev, kappa=4.0, grad_integrable=True)


def _zero_functional(d: int) -> FunctionalDriftSpec:
    def ev(t, seg, h):
        seg = np.asarray(seg, float)
        return np.zeros(seg.shape[:-2] + (seg.shape[-1],))

    return FunctionalDriftSpec(name="none", eval=ev, growth_g=lambda u: 0.0, lipschitz_K=0.0)


def _discrete_delay(d: int, c: float = 0.25) -> FunctionalDriftSpec:
    def ev(t, seg, h):
        return c * np.asarray(seg, float)[..., 0, :]

    return FunctionalDriftSpec(name="discrete_delay", eval=ev,
                               growth_g=lambda u: abs(c) * u, lipschitz_K=abs(c))


def _distributed_delay(d: int, r: float = 1.0, c: float = 1.0) -> FunctionalDriftSpec:
    """Trapezoid-rule integral of the segment: c * int_{-r}^0 x(s) ds."""

    def ev(t, seg, h):
        seg = np.asarray(seg, float)
        if seg.shape[-2] < 2:
            return np.zeros(seg.shape[:-2] + (seg.shape[-1],))
        inner = seg[..., 1:-1, :].sum(axis=-2)
        return c * h * (inner + 0.5 * (seg[..., 0, :] + seg[..., -1, :]))

    return FunctionalDriftSpec(name="distributed_delay", eval=ev,
                               growth_g=lambda u: abs(c) * r * u,
                               lipschitz_K=abs(c) * r)


def _tanh_delay(d: int, c: float = 1.0) -> FunctionalDriftSpec:
    """Bounded (hence genuinely sublinear) delayed response c tanh(x(-r))."""

    def ev(t, seg, h):
        return c * np.tanh(np.asarray(seg, float)[..., 0, :])

    return FunctionalDriftSpec(name="tanh_delay", eval=ev,
                               growth_g=lambda u: abs(c) * min(u, 1.0),
                               lipschitz_K=abs(c))


_DRIFTS: dict[str, Callable[..., DriftSpec]] = {
    "zero": _zero_drift,
    "constant": _constant_drift,
    "ou": _ou_drift,
    "singular": _singular_drift,
    "box": _box_drift,
}

_DIFFUSIONS: dict[str, Callable[..., DiffusionSpec]] = {
    "identity": _identity_diffusion,
    "diag": _diag_diffusion,
    "sqrt_bump": _sqrt_bump_diffusion,
}

_FUNCTIONALS: dict[str, Callable[..., FunctionalDriftSpec]] = {
    "none": _zero_functional,
    "discrete_delay": _discrete_delay,
    "distributed_delay": _distributed_delay,
    "tanh_delay": _tanh_delay,
}


def catalog_ids() -> dict[str, list[str]]:
    """All catalog ids, grouped by kind."""
    return {
        "drift": sorted(_DRIFTS),
        "diffusion": sorted(_DIFFUSIONS),
        "functional": sorted(_FUNCTIONALS),
    }


def _build(registry, kind, ident, d, params):
    try:
        builder = registry[ident]
    except KeyError:
        raise KeyError(f"unknown {kind} id {ident!r}; have {sorted(registry)}") from None
    return builder(d, **params)


def make_drift(ident: str, d: int, **params) -> DriftSpec:
    return _build(_DRIFTS, "drift", ident, d, params)


def make_diffusion(ident: str, d: int, **params) -> DiffusionSpec:
    return _build(_DIFFUSIONS, "diffusion", ident, d, params)


def make_functional(ident: str, d: int, **params) -> FunctionalDriftSpec:
    return _build(_FUNCTIONALS, "functional", ident, d, params)


def make_coefficients(d: int,
                      drift: str | tuple | DriftSpec = "zero",
                      diffusion: str | tuple | DiffusionSpec = "identity",
                      functional: str | tuple | FunctionalDriftSpec = "none") -> CoefficientSet:
    """Assemble a coefficient set from catalog ids, (id, params) pairs or specs."""

    def resolve(spec, maker):
        if isinstance(spec, (DriftSpec, DiffusionSpec, FunctionalDriftSpec)):
            return spec
        if isinstance(spec, str):
            return maker(spec, d)
        ident, params = spec
        return maker(ident, d, **dict(params))

    return CoefficientSet(
        d=d,
        drift=resolve(drift, make_drift),
        diffusion=resolve(diffusion, make_diffusion),
        functional=resolve(functional, make_functional),
    )


# ---------------------------------------------------------------------------
# numerical probes


def lqp_norm_numeric(drift: DriftSpec, d: int, T: float,
                     n_time: int = 64, n_space: int = 1024,
                     halfwidth: float = 2.0, tail_tol: float = 1e-3) -> float:
    """Midpoint-quadrature space-time norm ( int_0^T ( int |b|^p dx )^{q/p} dt )^{1/q}.

    The spatial box is [-halfwidth, halfwidth]^d with a tensorized
    midpoint rule, so an origin singularity is never evaluated at 0.
    Raises :class:`IntegrationError` when the outermost shell carries
    more than ``tail_tol`` of the mass, i.e. the box missed the support.
    """
    if d not in (1, 2):
        raise ValueError("numerical space-time norms support d in {1, 2}")
    p, q = drift.p, drift.q
    dt = T / n_time
    dx = 2.0 * halfwidth / n_space
    centers = -halfwidth + (np.arange(n_space) + 0.5) * dx
    if d == 1:
        pts = centers[:, None]
        edge = np.zeros(n_space, dtype=bool)
        edge[0] = edge[-1] = True
    else:
        gx, gy = np.meshgrid(centers, centers, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel()], axis=-1)
        ii, jj = np.meshgrid(np.arange(n_space), np.arange(n_space), indexing="ij")
        edge = ((ii == 0) | (ii == n_space - 1) | (jj == 0) | (jj == n_space - 1)).ravel()
    cell = dx ** d

    inner_q = []
    worst_edge_frac = 0.0
    for j in range(n_time):
        t = (j + 0.5) * dt
        b = np.asarray(drift.eval(t, pts), float)
        mag_p = np.sum(b * b, axis=-1) ** (p / 2.0)
        total = float(np.sum(mag_p)) * cell
        if total > 0.0:
            edge_mass = float(np.sum(mag_p[edge])) * cell
            worst_edge_frac = max(worst_edge_frac, edge_mass / total)
        inner_q.append(total ** (q / p))
    if worst_edge_frac > tail_tol:
        raise IntegrationError(
            f"boundary cells carry {worst_edge_frac:.2e} of the mass; "
            f"enlarge halfwidth={halfwidth}")
    return (math.fsum(inner_q) * dt) ** (1.0 / q)


@dataclass(frozen=True)
class EllipticityReport:
    min_eigenvalue: float
    max_eigenvalue: float
    kappa: float
    satisfied: bool


def ellipticity_probe(diffusion: DiffusionSpec, d: int, points: np.ndarray,
                      t: float = 0.0, rtol: float = 1e-9) -> EllipticityReport:
    """Spectral range of sigma sigma^T over probe points vs the declared kappa."""
    pts = np.asarray(points, float).reshape(-1, d)
    sig = np.asarray(diffusion.eval(t, pts), float)
    a = np.einsum("kij,klj->kil", sig, sig)
    eig = np.linalg.eigvalsh(a)
    lo, hi = float(eig.min()), float(eig.max())
    ok = (lo >= 1.0 / diffusion.kappa - rtol) and (hi <= diffusion.kappa + rtol)
    return EllipticityReport(min_eigenvalue=lo, max_eigenvalue=hi,
                             kappa=diffusion.kappa, satisfied=ok)


@dataclass(frozen=True)
class SublinearityReport:
    satisfied: bool
    worst_excess: float
    witness_time: Optional[float]


def sublinearity_probe(functional: FunctionalDriftSpec,
                       segments: Sequence[PathSegment],
                       atol: float = 1e-12) -> SublinearityReport:
    """Check |V(t, x)| <= g(sup-norm of x) over concrete segments."""
    worst = -math.inf
    witness = None
    for seg in segments:
        v = np.asarray(functional.eval(seg.base_time, seg.values[None, :, :], seg.grid.h), float)
        mag = float(np.sqrt(np.sum(v * v)))
        excess = mag - functional.growth_g(sup_norm(seg))
        if excess > worst:
            worst = excess
            witness = seg.base_time
    return SublinearityReport(satisfied=worst <= atol, worst_excess=worst,
                              witness_time=witness)
