"""Named, reproducible random streams.

Every (group, variable family) pair gets its own ``Generator`` derived from
the run seed through ``SeedSequence`` spawn keys.  Draws therefore depend only
on the seed and never on how groups are scheduled onto workers.
"""

from __future__ import annotations

import numpy as np

COORDINATOR = -1

FAMILIES = {
    "partition": 0,
    "init": 1,
    "shared": 2,
    "rho": 3,
    "idiosyncratic": 10,
    "loadings": 11,
    "phi": 12,
    "delta": 13,
    "noise": 14,
}


def stream(seed: int, group: int, family: str) -> np.random.Generator:
    """Generator for ``family`` owned by ``group`` (``COORDINATOR`` for shared draws)."""
    key = (group + 1, FAMILIES[family])
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def seed_sequence(seed: int, group: int, family: str) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=(group + 1, FAMILIES[family]))


def as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
