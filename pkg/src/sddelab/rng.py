"""Counter-based noise streams.

Each path owns an independent Philox stream keyed by
``(master_seed, path_index)``; the block counter enumerates steps.  The
Gaussian increments are produced by the inverse normal CDF applied to the
stream's 53-bit uniforms, so a path's noise is a pure function of
``(master_seed, path_index, n_steps, d)`` and never depends on how an
ensemble is chunked or scheduled.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtri

__all__ = ["path_key", "standard_normals", "brownian_increments"]

_MASK64 = (1 << 64) - 1


def path_key(master_seed: int, path_index: int) -> int:
    """128-bit Philox key: low word the seed, high word the path index."""
    if not 0 <= master_seed <= _MASK64:
        raise ValueError("master_seed must fit in an unsigned 64-bit word")
    if not 0 <= path_index <= _MASK64:
        raise ValueError("path_index must fit in an unsigned 64-bit word")
    return master_seed | (path_index << 64)


def standard_normals(master_seed: int, path_index: int, n: int) -> np.ndarray:
    """``n`` standard normal draws from the path's own stream."""
    bg = np.random.Philox(key=path_key(master_seed, path_index))
    raw = bg.random_raw(n)
    # uniforms strictly inside (0, 1): top 53 bits, centered in the cell
    u = (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53 + 2.0**-54
    return ndtri(u)


def brownian_increments(master_seed: int, path_index: int, n_steps: int,
                        d: int, h: float) -> np.ndarray:
    """Brownian increments of shape (n_steps, d) with variance h."""
    z = standard_normals(master_seed, path_index, n_steps * d)
    return math.sqrt(h) * z.reshape(n_steps, d)
