"""Named, reproducible RNG streams.

Every stochastic component (init, sampling, env, eval, ...) pulls its own
stream so that e.g. adding an eval rollout never perturbs training draws.
"""

import hashlib

import numpy as np


def named_stream(seed: int, *names: str) -> np.random.Generator:
    """Generator keyed by (seed, names); stable across runs and platforms."""
    entropy = [int(seed)]
    for name in names:
        digest = hashlib.sha256(name.encode("utf-8")).digest()
        entropy.append(int.from_bytes(digest[:8], "little"))
    return np.random.default_rng(np.random.SeedSequence(entropy))
