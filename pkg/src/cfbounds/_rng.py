"""Deterministic RNG substreams.

Every stochastic routine in the package derives its generators through
:func:`substream` so that draws are independent of consumption order: skipping
a draw in one branch never shifts the draws of another.
"""

from __future__ import annotations

import numpy as np

__all__ = ["substream"]


def substream(seed: int, *key: int) -> np.random.Generator:
    """Return a Generator for the substream identified by ``key`` under ``seed``.

    Distinct keys yield statistically independent streams (SeedSequence
    spawn-key semantics); the same (seed, key) always yields the same stream.
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))
