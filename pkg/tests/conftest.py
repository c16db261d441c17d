import numpy as np
import pytest

from sddelab import TimeGrid, SimulationConfig, make_coefficients


def build_config(d=1, r=0.25, T=1.0, h=0.0625, drift="zero",
                 diffusion="identity", functional="none",
                 segment=None, seed=42, cutoff=None):
    grid = TimeGrid(d=d, r=r, T=T, h=h)
    coeffs = make_coefficients(d, drift=drift, diffusion=diffusion,
                               functional=functional)
    if segment is None:
        segment = np.zeros(d)
    return SimulationConfig(grid, coeffs, np.asarray(segment, float),
                            master_seed=seed, drift_cutoff_level=cutoff)


@pytest.fixture
def small_grid():
    return TimeGrid(d=1, r=0.25, T=1.0, h=0.0625)
