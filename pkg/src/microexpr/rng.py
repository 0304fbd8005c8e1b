"""Seeded RNG substreams.

Every randomized stage (weight init, epoch shuffle, per-sample augmentation,
dropout masks, splits, synthetic corpora) draws from its own named substream
derived from the single run seed, so partial reruns and parallel execution
cannot change results.
"""

from __future__ import annotations

import numpy as np

STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_AUGMENT = 3
STREAM_DROPOUT = 4
STREAM_SPLIT = 5
STREAM_SYNTH = 6

_MASK = (1 << 63) - 1


def substream(seed: int, *path: int) -> np.random.Generator:
    """Independent PCG64 generator for (seed, *path); same arguments, same stream."""
    entropy = tuple(int(v) & _MASK for v in (seed, *path))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
