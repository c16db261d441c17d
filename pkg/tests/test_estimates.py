import math

import numpy as np
import pytest

from sddelab import coefficients as cf
from sddelab import estimates as est
from sddelab import zvonkin as zv
from sddelab.core import McEstimate, TimeGrid
from sddelab.engine import CoupledPathEnsemble, PathEnsemble

from conftest import build_config


def _driftless_ensemble(n_paths=2000, h=1.0 / 64.0, seed=3):
    cfg = build_config(drift="zero", segment=[0.0], h=h, seed=seed)
    return PathEnsemble(cfg, n_paths, driftless=True, chunk_size=1000)


class TestBoundReport:
    def test_satisfied_recomputed_from_fields(self):
        ok = est.BoundReport("x", McEstimate(1.0, 0.1, 100), rhs=2.0)
        assert ok.satisfied
        bad = est.BoundReport("x", McEstimate(3.0, 0.1, 100), rhs=2.0)
        assert not bad.satisfied
        open_ended = est.BoundReport("x", McEstimate(3.0, 0.1, 100), rhs=math.inf)
        assert open_ended.satisfied
        diverged = est.BoundReport("x", McEstimate(math.nan, 0.0, 1), rhs=2.0)
        assert not diverged.satisfied

    def test_serializable(self):
        rep = est.BoundReport("x", McEstimate(1.0, 0.1, 100), rhs=2.0,
                              parameters={"alpha": 0.2})
        d = rep.to_dict()
        assert d["name"] == "x"
        assert d["rhs"] == 2.0
        assert d["parameters"]["alpha"] == 0.2


class TestExpSupMoment:
    def test_alpha_zero_is_the_equality_case(self):
        ens = _driftless_ensemble(200)
        rep = est.exp_sup_moment_check(ens, 0.0, kappa=1.0)
        assert rep.lhs.mean == 1.0
        assert rep.lhs.std_error == 0.0
        assert rep.rhs == 1.0
        assert rep.satisfied

    def test_driftless_bound_with_margin(self):
        # alpha * 2 d kappa T = 0.4 < 1, so the closed form applies
        ens = _driftless_ensemble(20000)
        rep = est.exp_sup_moment_check(ens, 0.2, kappa=1.0)
        want_rhs = 4.0 / math.sqrt(0.6) - 3.0
        assert rep.rhs == pytest.approx(want_rhs, rel=1e-12)
        assert rep.lhs.mean + 3.0 * rep.lhs.std_error <= rep.rhs
        # the endpoint marginal alone already forces E >= 1/sqrt(0.6)
        floor = 1.0 / math.sqrt(0.6)
        assert rep.lhs.mean - 3.0 * rep.lhs.std_error > floor
        assert rep.parameters["stable"]

    def test_alpha_range_enforced_per_variant(self):
        ens = _driftless_ensemble(50)
        with pytest.raises(ValueError):
            est.exp_sup_moment_check(ens, 0.5, kappa=1.0)
        with pytest.raises(ValueError):
            est.exp_sup_moment_check(ens, 0.25, kappa=1.0, variant="drift")
        with pytest.raises(ValueError):
            est.exp_sup_moment_check(ens, 0.125, kappa=1.0, variant="functional")

    def test_drift_variant_reports_boundedness_only(self):
        ens = _driftless_ensemble(200)
        rep = est.exp_sup_moment_check(ens, 0.1, kappa=1.0, variant="drift")
        assert rep.rhs == math.inf
        assert math.isfinite(rep.lhs.mean)

    def test_functional_variant_squares_the_mean(self):
        ens = _driftless_ensemble(200)
        rep = est.exp_sup_moment_check(ens, 0.1, kappa=1.0, variant="functional")
        assert rep.parameters["squared_mean"] == pytest.approx(rep.lhs.mean ** 2)


class TestKrylov:
    def test_zero_function_zero_occupation(self):
        ens = _driftless_ensemble(200)
        f = est.KrylovTestFunction(
            "zero", 1, lambda t, x: np.zeros(np.asarray(x).shape[:-1]),
            4.0, 4.0, 0.0)
        rep = est.krylov_check(ens, f)
        assert rep.lhs.mean == 0.0
        assert rep.parameters["exp_mean"] == 1.0

    def test_unit_function_occupies_the_horizon(self):
        ens = _driftless_ensemble(200)
        f = est.KrylovTestFunction(
            "one", 1, lambda t, x: np.ones(np.asarray(x).shape[:-1]),
            4.0, 4.0, 2.0)
        rep = est.krylov_check(ens, f, constant=1.0)
        assert rep.lhs.mean == pytest.approx(1.0, rel=1e-12)
        assert rep.lhs.std_error == pytest.approx(0.0, abs=1e-12)
        assert rep.satisfied
        assert rep.parameters["ratio"] == pytest.approx(0.5, rel=1e-9)

    def test_exponent_admissibility_enforced(self):
        with pytest.raises(ValueError):
            est.KrylovTestFunction(
                "bad", 1, lambda t, x: np.ones(np.asarray(x).shape[:-1]),
                1.1, 1.1, 1.0)

    def test_shrinking_family_unit_norms(self):
        fam = est.shrinking_support_family([1.0, 0.5, 0.25, 0.125], 1,
                                           4.0, 4.0, 1.0)
        assert len(fam) == 4
        for f in fam:
            assert f.norm_analytic == pytest.approx(1.0)
        # the peak climbs like eps^(-1/p') while the norm stays put
        peaks = [float(f.eval(0.0, np.zeros((1, 1)))[0]) for f in fam]
        assert peaks == sorted(peaks)
        assert peaks[-1] == pytest.approx(0.125 ** -0.25)

    def test_fitted_constant_dominates_every_ratio(self):
        ens = _driftless_ensemble(2000)
        fam = est.shrinking_support_family([1.0, 0.5, 0.25, 0.125], 1,
                                           4.0, 4.0, 1.0)
        reports = [est.krylov_check(ens, f) for f in fam]
        fitted = est.fit_krylov_constant(reports)
        assert math.isfinite(fitted) and fitted > 0
        for rep in reports:
            assert rep.parameters["ratio_upper"] <= fitted + 1e-15
        # bound all of them with the fitted constant and re-check
        for f in fam:
            rep = est.krylov_check(ens, f, constant=fitted)
            assert rep.satisfied


class TestStability:
    def test_linear_drift_recovers_gamma_slope(self):
        # the coupled difference of two OU paths is deterministic, so
        # the log-log fit is exact to rounding
        coeffs = cf.make_coefficients(1, drift=("ou", {"theta": 0.8}))
        g = TimeGrid(1, 0.25, 1.0, 0.015625)
        rep = est.stability_experiment(coeffs, g, np.array([0.4]),
                                       np.array([1.0]), [0.1, 0.01, 0.001],
                                       2.0, n_paths=500, master_seed=9)
        assert rep.slope == pytest.approx(2.0, abs=1e-9)
        assert rep.empirical_constant == pytest.approx(1.0, rel=1e-6)

    def test_ladder_must_be_positive_and_distinct(self):
        coeffs = cf.make_coefficients(1, drift="zero")
        g = TimeGrid(1, 0.25, 1.0, 0.0625)
        base, direction = np.array([0.0]), np.array([1.0])
        with pytest.raises(ValueError):
            est.stability_experiment(coeffs, g, base, direction, [0.1],
                                     1.0, n_paths=4, master_seed=1)
        with pytest.raises(ValueError):
            est.stability_experiment(coeffs, g, base, direction, [0.1, -0.2],
                                     1.0, n_paths=4, master_seed=1)


class TestHolder:
    def test_brownian_threshold_between_two_fifths_and_three_fifths(self):
        cfg = build_config(drift="zero", segment=[0.0], h=1.0 / 64.0, seed=20)
        rep = est.holder_experiment(cfg, [0.4, 0.6], factors=(4, 16),
                                    n_paths=128)
        assert rep.verdicts[0.4] == "stable"
        assert rep.verdicts[0.6] == "diverging"
        assert rep.ratios[0.4] <= 1.2
        assert rep.ratios[0.6] >= 1.5

    def test_medians_cover_every_level(self):
        cfg = build_config(drift="zero", segment=[0.0], h=1.0 / 64.0, seed=20)
        rep = est.holder_experiment(cfg, [0.4], factors=(4,), n_paths=32)
        assert rep.step_sizes == (1.0 / 64.0, 1.0 / 256.0)
        assert len(rep.medians[0.4]) == 2


class TestGronwallMultiplier:
    def test_zero_drift_constant_jacobian_gives_zero(self):
        # no functional drift and an identically zero correction: both
        # integrands vanish and the exponential moment is exactly one
        coeffs = cf.make_coefficients(1, drift="zero")
        sol = zv.solve_backward_pde(
            coeffs, zv.PdeGrid(1, 4.0, 101, 1.0, 32))
        ca = build_config(drift="zero", segment=[0.3], seed=12)
        cb = build_config(drift="zero", segment=[0.35], seed=12)
        pairs = CoupledPathEnsemble(ca, cb, n_paths=50, chunk_size=25)
        paths, rep = est.gronwall_multiplier(pairs, sol, ca.coefficients,
                                             keep_paths=8)
        assert rep.lhs.mean == 1.0
        assert rep.lhs.std_error == 0.0
        for p in paths:
            assert float(p.a_values.max()) == 0.0

    def test_identical_segments_give_zero(self):
        coeffs = cf.make_coefficients(
            1, drift=("singular", {"beta": 0.2, "strength": 0.5}),
            functional=("discrete_delay", {"c": 0.25}))
        sol = zv.solve_backward_pde(
            coeffs, zv.PdeGrid(1, 4.0, 201, 1.0, 64))
        ca = build_config(drift=("singular", {"beta": 0.2, "strength": 0.5}),
                          functional=("discrete_delay", {"c": 0.25}),
                          segment=[0.3], seed=12)
        pairs = CoupledPathEnsemble(ca, ca, n_paths=20, chunk_size=20)
        paths, rep = est.gronwall_multiplier(pairs, sol, ca.coefficients,
                                             keep_paths=4)
        assert rep.lhs.mean == 1.0
        for p in paths:
            assert float(p.a_values.max()) == 0.0

    def test_singular_delay_pair_stays_integrable(self):
        coeffs = cf.make_coefficients(
            1, drift=("singular", {"beta": 0.2, "strength": 0.5}),
            functional=("discrete_delay", {"c": 0.25}))
        sol = zv.solve_backward_pde(
            coeffs, zv.PdeGrid(1, 4.0, 401, 1.0, 128))
        ca = build_config(drift=("singular", {"beta": 0.2, "strength": 0.5}),
                          functional=("discrete_delay", {"c": 0.25}),
                          h=1.0 / 64.0, segment=[0.3], seed=12)
        cb = build_config(drift=("singular", {"beta": 0.2, "strength": 0.5}),
                          functional=("discrete_delay", {"c": 0.25}),
                          h=1.0 / 64.0, segment=[0.35], seed=12)
        pairs = CoupledPathEnsemble(ca, cb, n_paths=2000, chunk_size=500)
        paths, rep = est.gronwall_multiplier(pairs, sol, ca.coefficients)
        assert math.isfinite(rep.lhs.mean)
        assert rep.lhs.mean >= 1.0
        assert rep.parameters["stable"]
        for p in paths:
            assert p.a_values[0] == 0.0
            assert np.all(np.diff(p.a_values) >= -1e-15)

    def test_multiplier_path_validation(self):
        with pytest.raises(ValueError):
            est.MultiplierPath(np.array([0.0, 0.5]), np.array([0.1, 0.2]))
        with pytest.raises(ValueError):
            est.MultiplierPath(np.array([0.0, 0.5, 1.0]),
                               np.array([0.0, 0.3, 0.2]))


class TestKhasminskii:
    def test_constant_rate_is_exact(self):
        rep = est.khasminskii_check(est.beta_constant(0.5), T=1.0)
        assert rep.lhs.mean == pytest.approx(math.exp(0.5), rel=1e-12)
        assert rep.lhs.std_error == 0.0
        assert rep.lhs.n_samples == 1
        assert rep.rhs == 2.0
        assert rep.satisfied

    def test_zero_rate_is_the_equality_case(self):
        rep = est.khasminskii_check(est.beta_constant(0.0), T=1.0)
        assert rep.lhs.mean == 1.0
        assert rep.rhs == 1.0
        assert rep.satisfied

    def test_clipped_square_by_monte_carlo(self):
        beta = est.beta_clipped_square(0.125, 4.0)
        rep = est.khasminskii_check(beta, T=1.0, n_paths=4000)
        assert rep.rhs == 2.0
        assert rep.lhs.mean + 3.0 * rep.lhs.std_error <= rep.rhs
        assert not rep.parameters["analytic"]

    def test_certificate_must_stay_below_one(self):
        with pytest.raises(ValueError):
            est.khasminskii_check(est.beta_constant(1.2), T=1.0)

    def test_beta_process_needs_exactly_one_generator(self):
        with pytest.raises(ValueError):
            est.BetaProcess("x", lambda T: 0.1, constant=1.0,
                            of_brownian=lambda t, w: w)
        with pytest.raises(ValueError):
            est.BetaProcess("x", lambda T: 0.1)


class TestGronwallHarness:
    def test_deterministic_generator_is_exact(self):
        K, C, p = 0.5, 2.0, 0.5
        rep = est.stochastic_gronwall_harness("deterministic", K=K, C=C, p=p,
                                              n_paths=16)
        assert rep.estimate.mean == pytest.approx((C * math.exp(K)) ** p,
                                                  rel=1e-12)
        assert rep.estimate.std_error == 0.0
        assert rep.scale_ratio_error <= 1e-12
        assert rep.fitted_rate == pytest.approx(p, rel=1e-9)
        assert rep.stable

    def test_martingale_free_case_is_c_to_the_p(self):
        rep = est.stochastic_gronwall_harness("deterministic", K=0.0, C=3.0,
                                              p=0.5, n_paths=16)
        assert rep.estimate.mean == pytest.approx(3.0 ** 0.5, rel=1e-12)

    def test_scale_equivariance_exact(self):
        for kind in ("geometric", "drifted"):
            rep = est.stochastic_gronwall_harness(
                kind, K=0.0 if kind == "geometric" else 0.5, C=1.0, p=0.5,
                n_paths=512)
            assert rep.scale_ratio_error <= 1e-6

    def test_stochastic_generators_stable(self):
        rep = est.stochastic_gronwall_harness("geometric", K=0.0, C=1.0,
                                              p=0.5, n_paths=4096)
        assert rep.stable
        assert math.isfinite(rep.estimate.mean)
        rep2 = est.stochastic_gronwall_harness("drifted", K=0.5, C=1.0,
                                               p=0.5, n_paths=4096)
        assert rep2.stable
        assert rep2.growth_ratio > 1.0

    def test_hypothesis_guards(self):
        with pytest.raises(ValueError):
            est.stochastic_gronwall_harness("deterministic", K=0.5, C=1.0,
                                            p=1.5)
        with pytest.raises(ValueError):
            est.stochastic_gronwall_harness("geometric", K=0.5, C=1.0, p=0.5)
        with pytest.raises(ValueError):
            est.stochastic_gronwall_harness("nonsense", K=0.5, C=1.0, p=0.5)


class TestMaximalFunction:
    def _indicator_grid(self, nx=513, halfwidth=4.0):
        ax = np.linspace(-halfwidth, halfwidth, nx)
        dx = ax[1] - ax[0]
        return ax, dx, (np.abs(ax) <= 1.0).astype(float)

    def test_inside_the_plateau(self):
        ax, dx, phi = self._indicator_grid()
        M = est.maximal_function(phi, dx)
        i0 = int(np.argmin(np.abs(ax)))
        assert M[i0] == 1.0

    def test_away_from_support_hits_one_third(self):
        # at distance 2 from the plateau the best window has radius 3
        # and captures exactly one third of its own length
        ax, dx, phi = self._indicator_grid()
        M = est.maximal_function(phi, dx, radii=[dx * m for m in range(1, 513)])
        i2 = int(np.argmin(np.abs(ax - 2.0)))
        assert abs(M[i2] - 1.0 / 3.0) <= dx

    def test_zero_function(self):
        M = est.maximal_function(np.zeros(11), 0.1)
        assert float(np.abs(M).max()) == 0.0

    def test_monotone_exactly(self):
        rng = np.random.default_rng(2)
        a = rng.random(101)
        b = a + rng.random(101)
        Ma = est.maximal_function(a, 0.05)
        Mb = est.maximal_function(b, 0.05)
        assert np.all(Mb >= Ma)

    def test_dominates_smallest_window_average(self):
        ax, dx, phi = self._indicator_grid(nx=257)
        M = est.maximal_function(phi, dx)
        smallest = est.maximal_function(phi, dx, radii=[dx])
        assert np.all(M >= smallest)

    def test_two_dimensional_plateau_and_monotone(self):
        n = 129
        ax = np.linspace(-2, 2, n)
        dx = ax[1] - ax[0]
        X, Y = np.meshgrid(ax, ax, indexing="ij")
        phi = ((np.abs(X) <= 0.5) & (np.abs(Y) <= 0.5)).astype(float)
        M = est.maximal_function(phi, dx)
        c = n // 2
        assert M[c, c] == 1.0
        M2 = est.maximal_function(phi + 0.3, dx)
        assert np.all(M2 >= M)

    def test_rejects_negative_input(self):
        with pytest.raises(ValueError):
            est.maximal_function(np.array([1.0, -0.5, 0.0]), 0.1)


class TestHardyLittlewood:
    def test_linear_core_needs_at_least_half(self):
        # the two-point inequality on a kink-like profile forces the
        # constant up to 1/2; the fit must sit at or above it
        rep = est.hardy_littlewood_check(est.smooth_linear_core(),
                                         n_pairs=2000)
        assert rep.fitted_cd >= 0.5
        # coincident sample pairs are dropped, never silently scored
        assert 0.9 * 2000 <= rep.n_pairs <= 2000

    def test_gaussian_profile_finite_constant(self):
        rep = est.hardy_littlewood_check(est.gaussian_bump(1.0), n_pairs=2000)
        assert math.isfinite(rep.fitted_cd)
        assert rep.fitted_cd > 0
        for p, ratio in rep.lp_ratios.items():
            # the maximal function dominates the function itself, and
            # its p-norm stays within the strong-type constant
            assert 0.95 <= ratio <= 3.0

    def test_worst_pair_is_recorded(self):
        rep = est.hardy_littlewood_check(est.smooth_linear_core(),
                                         n_pairs=500)
        x, y = rep.worst_pair
        assert x != y
        assert abs(x) <= 4.0 and abs(y) <= 4.0

    def test_deterministic_in_the_seed(self):
        a = est.hardy_littlewood_check(est.gaussian_bump(1.0), n_pairs=300,
                                       seed=99)
        b = est.hardy_littlewood_check(est.gaussian_bump(1.0), n_pairs=300,
                                       seed=99)
        assert a.fitted_cd == b.fitted_cd
        assert a.worst_pair == b.worst_pair
