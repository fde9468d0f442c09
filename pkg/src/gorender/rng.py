"""Platform-stable random streams.

Every stochastic step in the package draws from a Philox counter-based
generator. Gaussian variates use Box-Muller on top of its uniform doubles,
not numpy's ziggurat, so fixtures stay bit-reproducible.
"""
from __future__ import annotations

import numpy as np


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox generator keyed by ``seed`` plus optional sub-stream ids."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(s) & 0xFFFFFFFFFFFFFFFF for s in stream)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def gaussian(rng: np.random.Generator, shape, dtype=np.float64) -> np.ndarray:
    shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    n = int(np.prod(shape, dtype=np.int64))
    half = (n + 1) // 2
    u1 = rng.random(half)
    u2 = rng.random(half)
    # 1 - u keeps log away from zero
    r = np.sqrt(-2.0 * np.log1p(-u1))
    theta = 2.0 * np.pi * u2
    z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
    return z.reshape(shape).astype(dtype, copy=False)
