import numpy as np


def seeded_rng(seed):
    """Deterministic stream for init, sampling and shuffling.

    Philox 4x64 is counter based, so the stream is fixed by ``seed`` alone
    and does not depend on platform or thread.
    """
    return np.random.Generator(np.random.Philox(int(seed)))


def spawn(rng, n=1):
    """Independent child streams derived from ``rng``."""
    seeds = rng.integers(0, 2 ** 63 - 1, size=n)
    return [seeded_rng(int(s)) for s in seeds]
