"""Counter-based random streams derived from one master seed.

A stream is identified by ``(master_seed, stream_id, *counters)``; the tuple
is fed to :class:`numpy.random.SeedSequence`, so two streams with different
keys are statistically independent and any single component can be re-seeded
in isolation (for example client 3's batching in unlearning round 7 is
``rng(seed, "batch", PHASE_UNLEARN, 7, 3)``).
"""

import numpy as np

STREAMS = {
    "data": 0,
    "split": 1,
    "partition": 2,
    "init": 3,
    "batch": 4,
    "attack": 5,
    "poison": 6,
    "mia": 7,
}

PHASE_TRAIN = 0
PHASE_UNLEARN = 1
PHASE_CALIBRATE = 2


def seed_key(master_seed: int, stream: str, *counters: int) -> list[int]:
    return [int(master_seed), STREAMS[stream], *(int(c) for c in counters)]


def rng(master_seed: int, stream: str, *counters: int) -> np.random.Generator:
    return np.random.default_rng(seed_key(master_seed, stream, *counters))
