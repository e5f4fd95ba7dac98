"""Named random streams derived from a single root seed.

Every source of randomness in the package asks for a stream by name, so
adding or reordering consumers never shifts the values another consumer
sees.  Stream identity is (root_seed, name) and nothing else.
"""

import zlib

import numpy as np


def seed_stream(root_seed: int, name: str) -> np.random.Generator:
    """Return a generator for the named stream under ``root_seed``."""
    tag = zlib.crc32(name.encode("utf-8"))
    seq = np.random.SeedSequence(entropy=int(root_seed) & 0xFFFFFFFFFFFFFFFF,
                                 spawn_key=(tag,))
    return np.random.Generator(np.random.PCG64(seq))
