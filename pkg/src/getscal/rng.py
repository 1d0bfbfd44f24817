"""Seeded random streams.

Every consumer of randomness draws from its own PCG64 stream derived from the
experiment seed with ``SeedSequence(seed, spawn_key=(stream_id,))``. Stream ids
are fixed below and must never be renumbered, otherwise old results stop being
reproducible.
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "splits": 1,
    "classifier_init": 2,
    "classifier_dropout": 3,
    "calibrator_init": 4,
    "calibrator_dropout": 5,
    "gating_noise": 6,
    "sbm": 7,
}


def stream(seed: int, name: str) -> np.random.Generator:
    """Return the generator for consumer ``name`` under experiment ``seed``."""
    try:
        key = STREAMS[name]
    except KeyError:
        raise ValueError(f"unknown random stream {name!r}") from None
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(key,))))
