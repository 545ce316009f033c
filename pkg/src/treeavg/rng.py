"""Counter-based random stream derivation.

Every stochastic stage derives its stream from (base_seed, *keys) rather
than from a shared mutable generator, so execution order and worker count
cannot perturb results.
"""

from __future__ import annotations

import numpy as np

Seed = int | np.random.SeedSequence

# Role codes used when deriving per-stage streams inside the simulator.
ROLE_GROUPING = 1
ROLE_SITE_DATA = 2
ROLE_TARGET_SPLIT = 3
ROLE_LOCAL_FIT = 4
ROLE_LOC_FIT = 5
ROLE_REFERENCE_FIT = 6
ROLE_ET_FIT = 7
ROLE_EF_FIT = 8
ROLE_TEST_DRAW = 9
ROLE_DECISION_DRAW = 10
ROLE_ET_ORACLE_FIT = 11
ROLE_EF_ORACLE_FIT = 12


def child_seed(seed: Seed, *keys: int) -> np.random.SeedSequence:
    """Derive a child SeedSequence from `seed` and integer keys."""
    if isinstance(seed, np.random.SeedSequence):
        entropy = seed.entropy
        base = list(entropy) if isinstance(entropy, (list, tuple)) else [entropy]
    else:
        base = [int(seed)]
    return np.random.SeedSequence(base + [int(k) for k in keys])


def generator(seed: Seed, *keys: int) -> np.random.Generator:
    """A fresh PCG64 generator for (seed, *keys)."""
    return np.random.default_rng(child_seed(seed, *keys) if keys else _as_seq(seed))


def _as_seq(seed: Seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(int(seed))
