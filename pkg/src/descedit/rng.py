"""Counter-based, splittable random streams.

Every stream is a Philox generator keyed by ``(seed, *path)``, so a draw
depends only on its address, never on how many draws happened elsewhere.
"""

import numpy as np

# stream domains
DATA = 1
TRAIN = 2
SAMPLE = 3
INIT = 4
EVAL = 5
PRETRAIN = 6


def stream(seed: int, *path: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
