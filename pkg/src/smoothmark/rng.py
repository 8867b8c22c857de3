"""Seeded counter-based random streams.

Every stochastic operation in the package takes an explicit generator built
here.  Streams are keyed by ``(seed, *keys)`` so independent consumers (draw
batches, prompts, attack samples) never share state.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Philox generator keyed by ``seed`` and an optional stream path."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(k) & 0xFFFFFFFF for k in keys)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def as_rng(rng: np.random.Generator | int | None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return make_rng(0 if rng is None else rng)
