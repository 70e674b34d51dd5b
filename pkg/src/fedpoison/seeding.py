"""Named RNG substreams derived from a single master seed.

Every randomized stage of an experiment (partitioning, per-client GAN
training, per-round selection, per-client local training, ...) draws from
its own substream, keyed by stage name and integer indices. Substreams are
independent of each other, so toggling one stage (e.g. enabling a defense)
never perturbs the draws seen by another.
"""
from __future__ import annotations

import numpy as np

# Stage labels. Keep values stable: they are part of the reproducibility
# contract (a bundle's manifest + master seed must replay bit-identically).
PARTITION = 0
MALICIOUS = 1
ATTACK = 2
GAN = 3
SELECT = 4
TRAIN = 5
SHADOW = 6
INIT = 7
DATA = 8
DEFENSE = 9


def substream(master_seed: int, *key: int) -> np.random.Generator:
    """Return a Generator for the substream identified by ``key``."""
    seq = np.random.SeedSequence(master_seed, spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(seq)


def substream_seed(master_seed: int, *key: int) -> int:
    """Return a 63-bit integer seed for the substream (for APIs taking seeds)."""
    seq = np.random.SeedSequence(master_seed, spawn_key=tuple(int(k) for k in key))
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> 1)
