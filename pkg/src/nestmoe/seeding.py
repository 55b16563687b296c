"""Deterministic RNG streams derived from one master seed.

Every consumer gets an independent generator keyed by (master, stream id,
counter); training keys the counter by absolute epoch so a resumed run
draws exactly the sequence the uninterrupted run would have drawn.
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "datagen": 1,
    "init": 2,
    "noise": 3,
    "sampler": 4,
}


def stream_rng(master_seed: int, stream: str, counter: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(master_seed), STREAMS[stream], int(counter)])
