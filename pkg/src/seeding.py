"""Seed-keyed random substreams.

Every random draw in the toolkit comes from a Philox generator seeded by a
``numpy.random.SeedSequence(seed, spawn_key=keys)``. Draws are therefore keyed
by ids (class, instance, measurement, fold, ...) and never by draw order, which
keeps generation and training reproducible under any execution order.
"""

from enum import IntEnum

import numpy as np


class Role(IntEnum):
    PATHS = 0
    SLOPE = 1
    OFFSET = 2
    SCALE = 3
    NOISE = 4
    RFI = 5
    FOLDS = 10
    FOLD_INIT = 11
    SHUFFLE = 12
    DROPOUT = 13
    INIT = 14
    GRADCHECK = 15


def _sequence(seed: int, keys: tuple[int, ...]) -> np.random.SeedSequence:
    if seed < 0 or any(k < 0 for k in keys):
        raise ValueError("seed and substream keys must be non-negative")
    return np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))


def substream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(_sequence(seed, keys)))


def derive_seed(seed: int, *keys: int) -> int:
    state = _sequence(seed, keys).generate_state(1, dtype=np.uint64)
    return int(state[0])
