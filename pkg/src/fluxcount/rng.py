"""Deterministic RNG stream derivation.

Every stochastic stage derives independent child streams from one master seed via
SeedSequence keys. Streams are keyed by (stage tag, unit index), never by thread id,
so results are byte-identical at any worker count.
"""
from __future__ import annotations

import numpy as np

# Stage tags keep child streams disjoint between pipeline stages.
STAGE_CHARACTERIZE = 1
STAGE_SWEEP = 2
STAGE_LINDBLAD = 3
STAGE_SCAN = 4


def child_rng(seed: int, stage: int, unit: int = 0) -> np.random.Generator:
    """Generator for one (stage, unit) cell of the run keyed off the master seed."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.default_rng(np.random.SeedSequence((seed, stage, unit)))


def as_seed(rng_or_seed: int | np.random.Generator) -> int:
    """Normalize an int seed or a Generator into an int usable for child derivation.

    Passing a Generator draws one 63-bit integer from it, so repeated calls on the
    same Generator give independent (but reproducible) child families.
    """
    if isinstance(rng_or_seed, np.random.Generator):
        return int(rng_or_seed.integers(0, 2**63 - 1))
    return int(rng_or_seed)
