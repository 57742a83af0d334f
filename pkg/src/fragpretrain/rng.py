"""Named random streams derived from one global seed.

Each component asks for its own stream by name, so adding a consumer
never shifts another consumer's random draws.
"""

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))]))
