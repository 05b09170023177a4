"""Seed-stream derivation.

Every random draw in a run comes from ``np.random.default_rng([seed, phase, *keys])``.
The phase tag keeps the warm-up, detection and optimization streams disjoint, and
the per-node key means that adding nodes never changes the draws of existing ones.
"""

from __future__ import annotations

import enum

import numpy as np


class Phase(enum.IntEnum):
    TOPOLOGY = 1
    BYZANTINE = 2
    DATA = 3
    SHARED = 4
    SPLIT = 5
    WARMUP = 6
    DETECTION = 7
    OPTIMIZATION = 8
    ATTACK = 9
    REMOVAL = 10


def stream(seed: int, phase: Phase, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, phase, keys...)``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.default_rng([int(seed), int(phase), *(int(k) for k in keys)])
