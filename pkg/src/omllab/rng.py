"""Named random streams split from one root seed.

Each consumer asks for its own stream by name, so enabling one feature never
shifts the draws seen by another.
"""

import zlib

import numpy as np


def stream(root_seed: int, *names) -> np.random.Generator:
    """Independent generator for ``root_seed`` and a path of stream names."""
    key = tuple(zlib.crc32(str(n).encode()) for n in names)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(root_seed), spawn_key=key)))


def child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))
