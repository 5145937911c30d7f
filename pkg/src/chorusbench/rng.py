"""Named, reproducible random streams.

All randomness in the toolkit flows from a single integer seed through
named substreams, so any stage (scene synthesis, weight init, batch
shuffling) can be re-derived independently of execution order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag)
    return zlib.crc32(str(tag).encode("utf-8"))


def substream(seed: int, *tags) -> np.random.Generator:
    """Generator for the substream identified by (seed, *tags).

    Tags may be strings (hashed stably) or integers (used as-is); the same
    (seed, tags) always yields the same stream, independent of how many
    other streams were drawn before it.
    """
    entropy = [int(seed)] + [_tag_to_int(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))
