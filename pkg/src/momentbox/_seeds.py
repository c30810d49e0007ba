"""Seed plumbing: accept plain integers or SeedSequence objects anywhere."""

from __future__ import annotations

import numpy as np

def as_seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)
