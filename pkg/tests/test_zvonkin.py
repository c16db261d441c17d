import math
import os

import numpy as np
import pytest

from sddelab import coefficients as cf
from sddelab import zvonkin as zv
from sddelab.core import TimeGrid
from sddelab.engine import CoupledPathEnsemble, PathEnsemble, StoppingKind

from conftest import build_config


def _solution_singular(nx=401, n_time=256, halfwidth=4.0):
    coeffs = cf.make_coefficients(
        1, drift=("singular", {"beta": 0.2, "strength": 1.0}))
    grid = zv.PdeGrid(d=1, halfwidth=halfwidth, nx=nx, t_end=1.0,
                      n_time=n_time)
    return coeffs, zv.solve_backward_pde(coeffs, grid, boundary="dirichlet")


class TestPdeGrid:
    def test_spacing(self):
        g = zv.PdeGrid(d=1, halfwidth=3.0, nx=7, t_end=1.0, n_time=4)
        assert g.dx == pytest.approx(1.0)
        assert g.dt == pytest.approx(0.25)
        np.testing.assert_allclose(g.axis(), [-3, -2, -1, 0, 1, 2, 3])
        np.testing.assert_allclose(g.times(), [0.0, 0.25, 0.5, 0.75, 1.0])

    def test_rejects_degenerate(self):
        with pytest.raises(ValueError):
            zv.PdeGrid(d=3, halfwidth=1.0, nx=5, t_end=1.0, n_time=2)
        with pytest.raises(ValueError):
            zv.PdeGrid(d=1, halfwidth=1.0, nx=2, t_end=1.0, n_time=2)


class TestBackwardSolve:
    def test_zero_drift_gives_zero_correction(self):
        coeffs = cf.make_coefficients(1, drift="zero")
        grid = zv.PdeGrid(d=1, halfwidth=2.0, nx=41, t_end=1.0, n_time=16)
        sol = zv.solve_backward_pde(coeffs, grid)
        np.testing.assert_array_equal(sol.u_tilde, 0.0)
        np.testing.assert_array_equal(sol.gradient, 0.0)

    def test_constant_drift_reflecting_walls(self):
        # space-independent source integrates to b*(T - t); reflecting
        # walls keep the slice flat so the march reproduces it exactly
        b = 0.7
        coeffs = cf.make_coefficients(1, drift=("constant", {"value": [b]}))
        grid = zv.PdeGrid(d=1, halfwidth=3.0, nx=101, t_end=1.0, n_time=100)
        sol = zv.solve_backward_pde(coeffs, grid, boundary="neumann")
        for j, t in enumerate(grid.times()):
            np.testing.assert_allclose(sol.u_tilde[j], b * (1.0 - t),
                                       atol=1e-10)

    def test_constant_drift_absorbing_walls_deviate(self):
        # pinning the boundary to zero is wrong for a non-decaying
        # source; the interior still approaches b*(T-t) but the edges sag
        b = 0.7
        coeffs = cf.make_coefficients(1, drift=("constant", {"value": [b]}))
        grid = zv.PdeGrid(d=1, halfwidth=3.0, nx=101, t_end=1.0, n_time=100)
        sol = zv.solve_backward_pde(coeffs, grid, boundary="dirichlet")
        assert sol.u_tilde[0, 0, 0] == 0.0
        assert abs(sol.u_tilde[0, 50, 0] - b) < 0.25

    def test_constant_drift_two_dimensions(self):
        vec = [0.3, -0.2]
        coeffs = cf.make_coefficients(2, drift=("constant", {"value": vec}))
        grid = zv.PdeGrid(d=2, halfwidth=2.0, nx=41, t_end=1.0, n_time=50)
        sol = zv.solve_backward_pde(coeffs, grid, boundary="neumann")
        for j, t in enumerate(grid.times()):
            want = np.broadcast_to(np.asarray(vec) * (1.0 - t), (41, 41, 2))
            np.testing.assert_allclose(sol.u_tilde[j], want, atol=1e-9)

    def test_gaussian_source_matches_heat_kernel_integral(self):
        # sigma sigma^T = 2, terminal value zero, source
        # exp(-x^2 / (2 s0^2)): the solution is the time integral of the
        # broadened gaussian, evaluated here by quadrature and frozen
        s0 = 0.6
        coeffs = cf.make_coefficients(
            1, drift="zero", diffusion=("diag", {"diag": [math.sqrt(2.0)]}))
        grid = zv.PdeGrid(d=1, halfwidth=6.0, nx=1201, t_end=1.0, n_time=2000)

        def source(t, pts):
            x = np.asarray(pts, float)
            return np.exp(-x ** 2 / (2.0 * s0 ** 2))

        sol = zv.solve_backward_pde(coeffs, grid, source=source,
                                    boundary="dirichlet")
        probes = {
            (0.0, 0.0): 0.561737,
            (0.0, 0.7): 0.435227,
            (0.5, 0.7): 0.241535,
            (0.25, -1.3): 0.181826,
            (0.9, 0.0): 0.088999,
        }
        for (t, x), want in probes.items():
            got = float(sol.u_tilde_at(t, np.array([x]))[0, 0])
            assert got == pytest.approx(want, abs=2e-4)

    def test_divergence_is_reported(self):
        coeffs = cf.make_coefficients(
            1, drift=("constant", {"value": [1e9]}))
        grid = zv.PdeGrid(d=1, halfwidth=1.0, nx=5, t_end=1e6, n_time=1)
        with pytest.raises(zv.PdeSolverError):
            zv.solve_backward_pde(coeffs, grid, boundary="neumann")


class TestInterpolation:
    def test_values_reproduced_at_nodes(self):
        coeffs, sol = _solution_singular(nx=101, n_time=32)
        g = sol.grid
        j, i = 10, 37
        got = sol.u_tilde_at(g.times()[j], np.array([g.axis()[i]]))
        np.testing.assert_allclose(got.ravel(), sol.u_tilde[j, i], atol=1e-13)

    def test_clamps_outside_box(self):
        coeffs, sol = _solution_singular(nx=101, n_time=32)
        edge = sol.u_tilde_at(0.0, np.array([sol.grid.halfwidth]))
        beyond = sol.u_tilde_at(0.0, np.array([sol.grid.halfwidth + 5.0]))
        np.testing.assert_allclose(beyond, edge, atol=1e-13)
        assert not sol.in_domain(np.array([sol.grid.halfwidth + 5.0]))
        assert sol.in_domain(np.array([0.0]))


class TestTransform:
    def test_identity_when_correction_vanishes(self):
        coeffs = cf.make_coefficients(1, drift="zero")
        grid = zv.PdeGrid(d=1, halfwidth=4.0, nx=41, t_end=1.0, n_time=8)
        sol = zv.solve_backward_pde(coeffs, grid)
        cfg = build_config(drift="zero", segment=[0.2], seed=6)
        ens = PathEnsemble(cfg, 4, chunk_size=4)
        for ch in ens.chunks():
            out, exit_step = zv.transform_values(cfg.grid, ch.values, sol)
            np.testing.assert_allclose(out, ch.values, atol=1e-13)

    def test_freezes_after_domain_exit(self):
        coeffs, sol = _solution_singular(nx=101, n_time=32, halfwidth=0.05)
        cfg = build_config(drift="zero", segment=[0.0], seed=6)
        ens = PathEnsemble(cfg, 4, chunk_size=4)
        m = cfg.grid.m
        for ch in ens.chunks():
            out, exit_step = zv.transform_values(cfg.grid, ch.values, sol)
            assert (exit_step <= cfg.grid.n_steps).any()
            for b in range(out.shape[0]):
                k = int(exit_step[b])
                if k <= cfg.grid.n_steps:
                    tail = out[b, m + k:]
                    np.testing.assert_array_equal(
                        tail, np.broadcast_to(tail[0], tail.shape))

    def test_transform_path_roles(self):
        coeffs, sol = _solution_singular(nx=101, n_time=32)
        cfg = build_config(drift=("singular", {"beta": 0.2, "strength": 1.0}),
                           segment=[0.3], seed=6)
        from sddelab.engine import simulate_path
        path, _, _ = simulate_path(cfg, 0)
        tpath, record = zv.transform_path(path, sol)
        assert tpath.values.shape == path.values.shape
        assert record.kind in (StoppingKind.HORIZON, StoppingKind.DOMAIN_EXIT)


class TestContraction:
    def test_window_found_at_one_third(self):
        coeffs, sol = _solution_singular()
        win = zv.contraction_window(sol, threshold=1.0 / 3.0)
        assert 0.0 < win.delta <= sol.grid.t_end
        assert win.achieved_lipschitz <= 1.0 / 3.0
        assert win.threshold == pytest.approx(1.0 / 3.0)

    def test_longer_horizon_larger_constant(self):
        coeffs, sol = _solution_singular()
        times, lips = zv.lipschitz_profile(sol)
        assert times.shape == lips.shape
        # the correction is built backward from zero terminal data, so
        # the gradient grows with distance from the horizon
        assert lips[0] >= lips[-1]
        assert lips[-1] <= 1e-12

    def test_unreachable_threshold_raises(self):
        coeffs, sol = _solution_singular(nx=201, n_time=64)
        with pytest.raises(zv.WindowNotFoundError) as err:
            zv.contraction_window(sol, threshold=1e-9)
        assert err.value.best > 0.0


class TestSandwich:
    def test_comparable_on_certified_window(self):
        coeffs, sol = _solution_singular()
        win = zv.contraction_window(sol, threshold=1.0 / 3.0)
        cfg_a = build_config(drift=("singular", {"beta": 0.2, "strength": 1.0}),
                             h=1.0 / 64.0, segment=[0.3], seed=5)
        cfg_b = build_config(drift=("singular", {"beta": 0.2, "strength": 1.0}),
                             h=1.0 / 64.0, segment=[0.35], seed=5)
        pairs = CoupledPathEnsemble(cfg_a, cfg_b, n_paths=100, chunk_size=50)
        rep = zv.sandwich_check(pairs, sol, win)
        assert rep.n_checked > 0
        assert rep.n_failures == 0
        assert rep.fraction_ok == 1.0
        # strict inequalities with the certified margin
        assert rep.worst_lower > 1.0
        assert rep.worst_upper > 1.0


class TestItoResidual:
    def test_transformed_process_is_driftless(self):
        # after the correction the transformed coordinate should be a
        # local martingale; the discrete residual means sit inside their
        # own three-sigma bands
        coeffs = cf.make_coefficients(
            1, drift=("singular", {"beta": 0.2, "strength": 0.5}))
        grid = zv.PdeGrid(d=1, halfwidth=4.0, nx=401, t_end=1.0, n_time=256)
        sol = zv.solve_backward_pde(coeffs, grid, boundary="dirichlet")
        cfg = build_config(drift=("singular", {"beta": 0.2, "strength": 0.5}),
                           h=1.0 / 128.0, segment=[0.3], seed=14)
        ens = PathEnsemble(cfg, 4000, chunk_size=1000)
        out = zv.ito_residual(ens, sol, cfg.coefficients, [0.5, 1.0])
        for t, comps in out.items():
            for est in comps:
                assert abs(est.mean) <= 3.0 * est.std_error


class TestEmbedding:
    def test_norm_surrogates_finite(self):
        coeffs, sol = _solution_singular()
        rep = zv.embedding_check(sol, p=4.0, q=4.0)
        assert math.isfinite(rep.h_norm) and rep.h_norm > 0
        assert math.isfinite(rep.dt_norm) and rep.dt_norm > 0
        assert math.isfinite(rep.n_time_holder)
        assert math.isfinite(rep.n_sup_holder)
        assert rep.epsilon > 0 and rep.delta_exp > 0

    def test_supercritical_pair_rejected(self):
        coeffs, sol = _solution_singular(nx=101, n_time=32)
        with pytest.raises(ValueError):
            zv.embedding_check(sol, p=2.0, q=2.0)


class TestExport:
    def test_grid_file_round_trip(self, tmp_path):
        coeffs, sol = _solution_singular(nx=51, n_time=8)
        target = tmp_path / "u_tilde.grid.txt"
        sol.export_grid_file(str(target))
        with open(target) as fh:
            header = fh.readline().split()
            d, halfwidth, nx, n_times = (int(header[0]), float(header[1]),
                                         int(header[2]), int(header[3]))
            t_start, t_end = float(header[4]), float(header[5])
            rows = [np.fromstring(line, sep=" ") for line in fh]
        assert (d, nx, n_times) == (1, 51, 9)
        assert (t_start, t_end) == (0.0, 1.0)
        assert halfwidth == 4.0
        table = np.stack(rows).reshape(n_times, d, nx)
        for j in range(n_times):
            np.testing.assert_array_equal(table[j, 0], sol.u_tilde[j, :, 0])
