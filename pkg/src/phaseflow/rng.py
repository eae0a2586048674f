"""Seeded, counter-based random streams.

One u64 seed covers a whole job.  Every subsystem derives its own Philox
stream from (seed, domain, index), so draws never depend on scheduling,
worker count or call interleaving.  Domain codes are frozen: renumbering
them silently changes every artifact generated under a given seed.
"""

import numpy as np

DOMAIN_GEN = 1
DOMAIN_TRAIN_INIT = 2
DOMAIN_TRAIN_EPOCH = 3
DOMAIN_SIMULATE = 4
DOMAIN_EVAL = 5


def stream(seed: int, domain: int, index: int = 0) -> np.random.Generator:
    """Independent Philox stream for (seed, domain, index)."""
    ss = np.random.SeedSequence([int(seed), int(domain), int(index)])
    return np.random.Generator(np.random.Philox(ss))
