"""Counter-based random streams.

Every draw is addressed by ``(seed, stream, step)``, so the numbers a run
consumes do not depend on how work is scheduled.  Each address gets its own
Philox generator; a step draws its whole ``(K, d)`` block at once.
"""

import enum

import numpy as np

_MASK64 = (1 << 64) - 1


class Stream(enum.IntEnum):
    INIT = 0
    PROPOSAL = 1
    RESAMPLE = 2
    FINAL = 3
    OBSERVATION = 4


def generator(seed: int, stream: int, step: int = 0) -> np.random.Generator:
    """Independent generator for one ``(seed, stream, step)`` address."""
    ss = np.random.SeedSequence(int(seed) & _MASK64, spawn_key=(int(stream), int(step)))
    return np.random.Generator(np.random.Philox(ss))


def normals(seed: int, stream: int, step: int, shape) -> np.ndarray:
    return generator(seed, stream, step).standard_normal(shape)
