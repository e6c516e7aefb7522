"""
Seeded random streams. Every consumer asks for its own stream so that, for
instance, changing the batch order never changes the initial weights.
"""

from enum import IntEnum

import numpy as np


class Stream(IntEnum):
    IMAGE_INIT = 0
    TEXT_INIT = 1
    BATCHING = 2
    SYNTHETIC = 3
    GRAD_CHECK = 4


def generator(seed: int, stream: Stream, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, int(stream), *keys])
