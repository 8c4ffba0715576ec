"""Seed splitting for reproducible trials.

``trial_seed(master, i)`` mixes the master seed with the trial index through the SplitMix64
finalizer. Each trial then owns independent numpy streams derived with
``SeedSequence(trial_seed, spawn_key=(stream,))``.
"""
from __future__ import annotations

from enum import IntEnum

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


class Stream(IntEnum):
    ARM_NOISE = 0
    POLICY = 1
    TIE_BREAK = 2


def splitmix64(x: int) -> int:
    z = (x + GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def trial_seed(master_seed: int, index: int) -> int:
    return splitmix64((splitmix64(master_seed & MASK64) + index) & MASK64)


def stream_rng(seed: int, stream: Stream) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(stream),)))
