"""
Deterministic random substreams.

Every random task (one imputed row, one bootstrap resample, one study
replication) gets its own generator spawned from the master seed and the task
keys, so results never depend on evaluation order or worker count.
"""
from typing import Sequence

import numpy as np


def _entropy(seed: int, keys: Sequence[int]) -> list:
    return [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) for k in keys]


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Generator for the task identified by (seed, *keys)"""
    return np.random.default_rng(np.random.SeedSequence(_entropy(seed, keys)))


def derive_seed(seed: int, *keys: int) -> int:
    """64-bit child seed for nesting substreams (e.g. reimputation inside a resample)"""
    state = np.random.SeedSequence(_entropy(seed, keys)).generate_state(1, dtype=np.uint64)
    return int(state[0])


# Task tags keep sibling substreams of one master seed apart
TAG_GENERATE = 1
TAG_IMPUTE = 2
TAG_BOOTSTRAP = 3
TAG_JITTER = 4
TAG_REIMPUTE = 5
TAG_CHISQ = 6
