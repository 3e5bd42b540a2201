"""Named random streams derived from one global seed.

Streams use the counter-based Philox generator keyed by the seed and a path
of names/integers, so drawing from one stream never shifts another.
"""
import zlib

import numpy as np


def _word(part):
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed, *path):
    """Generator for ``(seed, *path)``, e.g. ``stream(7, "augment", "curve_0001", 3)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_word(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
