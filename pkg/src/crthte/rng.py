"""Reproducible random streams.

Every stochastic routine receives a :class:`numpy.random.Generator` built
on the counter-based Philox bit generator.  Substreams are addressed by a
tuple of integers (``seed, replicate, method, ...``) so results never depend
on the order in which parallel workers pick up jobs.
"""

from __future__ import annotations

import numpy as np

__all__ = ["substream", "as_generator", "child", "kernel_seed"]


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Return an independent generator addressed by ``(seed, *keys)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def as_generator(seed) -> np.random.Generator:
    """Coerce an int, ``None`` or an existing generator into a generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        seed = 0
    return substream(int(seed))


def child(rng: np.random.Generator, *keys: int) -> np.random.Generator:
    """Derive a keyed child stream from a generator without advancing it twice."""
    base = int(rng.integers(0, 2**63 - 1))
    return substream(base, *keys)


def kernel_seed(rng: np.random.Generator) -> int:
    """Draw a 32-bit seed for the internal RNG of a compiled kernel."""
    return int(rng.integers(0, 2**31 - 1))
