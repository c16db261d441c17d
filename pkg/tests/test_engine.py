import numpy as np
import pytest

from sddelab import coefficients as cf
from sddelab import engine as eng
from sddelab.core import CompactSetSpec, TimeGrid
from sddelab.engine import (
    CoupledPathEnsemble,
    LocalizationSpec,
    PathEnsemble,
    SimulationConfig,
    StoppingKind,
    detect_stopping,
    refinement_study,
    simulate_driftless,
    simulate_pair,
    simulate_path,
    truncate_coefficients,
)

from conftest import build_config


class TestScheme:
    def test_euler_step_identity(self):
        # with constant drift and identity noise every step is exactly
        # x + b*h + dW, so the residual against the stored increments
        # vanishes to rounding
        cfg = build_config(drift=("constant", {"value": [0.7]}), segment=[0.1],
                          seed=99)
        ens = PathEnsemble(cfg, n_paths=8, chunk_size=3)
        m = cfg.grid.m
        for ch in ens.chunks():
            res = (ch.values[:, m + 1:, 0] - ch.values[:, m:-1, 0]
                   - ch.increments[:, :, 0])
            np.testing.assert_allclose(res, 0.7 * cfg.grid.h, atol=1e-14)

    def test_history_rows_hold_initial_segment(self):
        cfg = build_config(drift="zero", segment=[0.1], seed=99)
        path, _, _ = simulate_path(cfg, 0)
        m = cfg.grid.m
        np.testing.assert_array_equal(path.values[: m + 1, 0],
                                      np.full(m + 1, 0.1))

    def test_matches_reference_recursion(self):
        # replay the same increments through a plain python loop
        cfg = build_config(drift=("ou", {"theta": 1.2}),
                           functional=("discrete_delay", {"c": 0.3}),
                           segment=[0.4], seed=17)
        path, _, inc = simulate_path(cfg, 5)
        g = cfg.grid
        coeffs = cfg.effective_coefficients()
        x = np.full(g.m + 1, 0.4)
        vals = list(x)
        for k in range(g.n_steps):
            seg = np.array(vals[k: k + g.m + 1]).reshape(-1, 1)
            t = g.forward_times()[k]
            b = coeffs.drift.eval(t, seg[-1:].reshape(1, 1))[0, 0]
            v = coeffs.functional.eval(t, seg[None, :, :], g.h)[0, 0]
            nxt = vals[-1] + (b + v) * g.h + inc[k, 0]
            vals.append(nxt)
        np.testing.assert_allclose(path.values[:, 0], vals, atol=1e-12)

    def test_driftless_drops_both_drift_terms(self):
        cfg = build_config(drift=("constant", {"value": [5.0]}),
                           functional=("discrete_delay", {"c": 2.0}),
                           segment=[0.2], seed=31)
        path, inc = simulate_driftless(cfg, 2)
        m = cfg.grid.m
        walk = 0.2 + np.concatenate([[0.0], np.cumsum(inc[:, 0])])
        np.testing.assert_allclose(path.values[m:, 0], walk, atol=1e-14)


class TestDeterminism:
    def test_same_seed_same_paths(self):
        cfg = build_config(drift=("ou", {"theta": 0.5}), segment=[0.3], seed=7)
        a, _, _ = simulate_path(cfg, 11)
        b, _, _ = simulate_path(cfg, 11)
        np.testing.assert_array_equal(a.values, b.values)

    def test_chunk_size_invariance(self):
        cfg = build_config(drift=("ou", {"theta": 0.5}), segment=[0.3], seed=7)
        payoff = lambda ch: ch.values[:, -1, 0]
        e1 = PathEnsemble(cfg, 64, chunk_size=5).estimate(payoff)
        e2 = PathEnsemble(cfg, 64, chunk_size=64).estimate(payoff)
        assert e1.mean == e2.mean
        assert e1.std_error == e2.std_error

    def test_worker_count_invariance(self):
        cfg = build_config(drift=("ou", {"theta": 0.5}), segment=[0.3], seed=7)
        payoff = lambda ch: ch.values[:, -1, 0]
        e1 = PathEnsemble(cfg, 64, chunk_size=16, workers=1).estimate(payoff)
        e3 = PathEnsemble(cfg, 64, chunk_size=16, workers=3).estimate(payoff)
        assert e1.mean == e3.mean
        assert e1.std_error == e3.std_error

    def test_paths_indexed_not_sequential(self):
        # path k is a pure function of (master_seed, k); simulating it
        # alone or within an ensemble gives the same trajectory
        cfg = build_config(drift="zero", segment=[0.0], seed=55)
        alone, _, _ = simulate_path(cfg, 9)
        ens = PathEnsemble(cfg, n_paths=12, chunk_size=4)
        rows = {}
        for ch in ens.chunks():
            for j, idx in enumerate(ch.indices):
                rows[int(idx)] = ch.values[j]
        np.testing.assert_array_equal(rows[9], alone.values)

    def test_distinct_paths_differ(self):
        cfg = build_config(drift="zero", segment=[0.0], seed=55)
        a, _, _ = simulate_path(cfg, 0)
        b, _, _ = simulate_path(cfg, 1)
        assert not np.array_equal(a.values, b.values)


class TestCoupling:
    def test_pair_shares_increments(self):
        cfg_a = build_config(drift=("ou", {"theta": 0.5}), segment=[0.3], seed=3)
        cfg_b = build_config(drift=("ou", {"theta": 0.5}), segment=[0.31], seed=3)
        pa, pb, inc = simulate_pair(cfg_a, cfg_b, 4)
        solo_a, _, inc_a = simulate_path(cfg_a, 4)
        np.testing.assert_array_equal(pa.values, solo_a.values)
        np.testing.assert_array_equal(inc, inc_a)
        # identical configs give identical paths through the coupling
        pa2, pb2, _ = simulate_pair(cfg_a, cfg_a, 4)
        np.testing.assert_array_equal(pa2.values, pb2.values)

    def test_coupled_ensemble_chunks(self):
        cfg_a = build_config(drift="zero", segment=[0.0], seed=13)
        cfg_b = build_config(drift="zero", segment=[0.5], seed=13)
        ens = CoupledPathEnsemble(cfg_a, cfg_b, n_paths=10, chunk_size=4)
        seen = 0
        for ca, cb in ens.chunks():
            np.testing.assert_array_equal(ca.increments, cb.increments)
            # same noise, different start: the gap stays exactly constant
            gap = cb.values[:, :, 0] - ca.values[:, :, 0]
            np.testing.assert_allclose(gap, 0.5, atol=1e-12)
            seen += ca.values.shape[0]
        assert seen == 10


class TestTruncation:
    def test_identical_inside_region(self):
        cfg = build_config(drift=("ou", {"theta": 0.9}), segment=[0.2], seed=99)
        loc = LocalizationSpec(n=50.0, d=1)
        cut = truncate_coefficients(cfg.coefficients, loc)
        cfg_cut = SimulationConfig(cfg.grid, cut, np.array([0.2]), master_seed=99)
        for k in range(6):
            a, _, _ = simulate_path(cfg, k)
            b, _, _ = simulate_path(cfg_cut, k)
            np.testing.assert_array_equal(a.values, b.values)

    def test_cutoff_flattens_far_field(self):
        coeffs = cf.make_coefficients(1, drift=("constant", {"value": [3.0]}))
        cut = truncate_coefficients(coeffs, LocalizationSpec(n=1.0, d=1))
        far = cut.drift.eval(0.0, np.array([[100.0]]))
        assert abs(far[0, 0]) < 3.0


class TestStopping:
    def test_level_crossing_detected(self):
        cfg = build_config(drift="zero", segment=[0.0], seed=3)
        path, _, _ = simulate_path(cfg, 0)
        rec = detect_stopping(path, cfg.coefficients, 0.05)
        assert rec.kind is StoppingKind.STATE_EXCEEDED
        assert 0.0 < rec.time <= cfg.grid.T

    def test_horizon_when_no_crossing(self):
        cfg = build_config(drift="zero", segment=[0.0], seed=3)
        path, _, _ = simulate_path(cfg, 0)
        rec = detect_stopping(path, cfg.coefficients, 1e9)
        assert rec.kind is StoppingKind.HORIZON
        assert rec.time == cfg.grid.T

    def test_compact_set_spec(self):
        cfg = build_config(drift="zero", segment=[0.0], seed=3)
        path, _, _ = simulate_path(cfg, 0)
        rec = detect_stopping(path, cfg.coefficients,
                              CompactSetSpec(n=1e9))
        assert rec.kind is StoppingKind.HORIZON


class TestRefinement:
    def test_additive_noise_near_order_one(self):
        cfg = build_config(drift=("ou", {"theta": 1.5}), segment=[0.4], seed=7)
        out = refinement_study(cfg, n_paths=256, factors=(2, 4, 8))
        errs = out["mean_abs_error"]
        assert all(a > b for a, b in zip(errs, errs[1:]))
        assert out["observed_order"] > 0.8

    def test_multiplicative_noise_near_order_half(self):
        cfg = build_config(drift=("ou", {"theta": 1.5}), diffusion="sqrt_bump",
                           segment=[0.4], seed=7)
        out = refinement_study(cfg, n_paths=256, factors=(2, 4, 8))
        assert 0.3 < out["observed_order"] < 0.9

    def test_rejects_unit_factor(self):
        cfg = build_config(seed=1)
        with pytest.raises(ValueError):
            refinement_study(cfg, n_paths=8, factors=(1, 2))


class TestEstimation:
    def test_prefix_estimates_nest(self):
        cfg = build_config(drift="zero", segment=[0.0], seed=23)
        ens = PathEnsemble(cfg, 100, chunk_size=32)
        payoff = lambda ch: np.abs(ch.values[:, -1, 0])
        parts = ens.prefix_estimates(payoff, fractions=(0.25, 0.5, 1.0))
        assert [e.n_samples for e in parts] == [25, 50, 100]
        full = ens.estimate(payoff)
        assert parts[-1].mean == full.mean

    def test_collect_orders_by_path_index(self):
        cfg = build_config(drift="zero", segment=[0.0], seed=23)
        payoff = lambda ch: ch.values[:, -1, 0]
        small = PathEnsemble(cfg, 50, chunk_size=7).collect(payoff)
        big = PathEnsemble(cfg, 50, chunk_size=50).collect(payoff)
        np.testing.assert_array_equal(small, big)

    def test_start_index_offsets_stream(self):
        cfg = build_config(drift="zero", segment=[0.0], seed=23)
        payoff = lambda ch: ch.values[:, -1, 0]
        head = PathEnsemble(cfg, 20, chunk_size=20).collect(payoff)
        tail = PathEnsemble(cfg, 10, chunk_size=10, start_index=10).collect(payoff)
        np.testing.assert_array_equal(head[10:], tail)
