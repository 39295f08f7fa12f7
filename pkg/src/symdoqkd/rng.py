"""Seed-addressed random substreams.

Every stochastic stage draws from a generator keyed by
``(master_seed, stage, *indices)``.  The key is fed to numpy's
``SeedSequence`` as a spawn key, so the stream for subnet 3 does not depend
on how many subnets exist or in which order workers pick them up.
"""

import zlib

import numpy as np

# Stage tags are hashed rather than enumerated so new stages never shift old ones.
def _stage_tag(stage: str) -> int:
    return zlib.crc32(stage.encode("ascii"))


def substream(master_seed: int, stage: str, *indices: int) -> np.random.Generator:
    if master_seed < 0:
        raise ValueError("master seed must be non-negative")
    key = (_stage_tag(stage),) + tuple(int(i) for i in indices)
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=key))
