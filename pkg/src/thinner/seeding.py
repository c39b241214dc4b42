"""Seed fan-out.

Every random draw in the package comes from ``stream(seed, purpose, *counters)``.
The generator is keyed by ``SeedSequence(seed, spawn_key=(purpose, *counters))``
so independent purposes never share a stream and adding a new purpose never
perturbs an existing one.

Purposes:

    INIT      weight initialization
    DATA      synthetic sample generation
    SPLIT     train/validation split
    SHUFFLE   per-epoch minibatch order        counters: (round, epoch)
    STATS     response-statistics subsampling  counters: (round,)
"""

import numpy as np

INIT = 0
DATA = 1
SPLIT = 2
SHUFFLE = 3
STATS = 4


def stream(seed, purpose, *counters):
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(purpose), *map(int, counters)))
    return np.random.default_rng(ss)
