"""Named random streams derived from one root seed.

Each pipeline stage draws from its own stream so that changing how much
randomness one stage consumes never shifts another.
"""

import zlib

import numpy as np

STREAMS = ("data", "init", "perturb", "shuffle", "prefit", "eval")


def stream(seed: int, name: str) -> np.random.Generator:
    """Return the generator for sub-stream ``name`` of root ``seed``."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), key]))
