"""Seeded random streams.

Every stochastic operation in the package draws from a Philox4x32-10
counter-based generator (numpy's ``Philox`` bit generator). Streams are
keyed by a base seed plus an optional tuple of integer indices, so that
e.g. the dropout masks of ensemble member ``e``, pass ``t`` come from
``stream(base_seed, e, t)`` regardless of how many other streams were
consumed before.

Gaussian samples are produced from the stream's uniforms with the
Box-Muller transform rather than numpy's ziggurat, which keeps the
pipeline simple to reproduce outside numpy.
"""

from __future__ import annotations

import numpy as np

Generator = np.random.Generator


def stream(seed: int, *indices: int) -> Generator:
    """Return an independent Philox stream for ``(seed, *indices)``."""
    if seed < 0 or any(i < 0 for i in indices):
        raise ValueError("seeds and stream indices must be non-negative")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(i) for i in indices))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *indices: int) -> int:
    """Derive a 63-bit integer seed for a sub-stream (used for ensemble members)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(i) for i in indices))
    return int(ss.generate_state(1, dtype=np.uint64)[0]) >> 1


def box_muller(rng: Generator, n: int) -> np.ndarray:
    """Draw ``n`` standard normal float64 samples via Box-Muller."""
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1]
    u2 = rng.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    return np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
