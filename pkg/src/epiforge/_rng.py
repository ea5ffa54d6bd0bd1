"""Keyed random streams.

Every random draw in the package goes through :func:`stream`, which derives an
independent Philox generator from a root seed plus a tuple of integer keys
(episode index, epoch, image position, ...).  Any stream can therefore be
rebuilt in isolation without replaying the ones before it.
"""

import numpy as np


def stream(seed: int, *keys: int) -> np.random.Generator:
    if seed < 0 or any(k < 0 for k in keys):
        raise ValueError(f"seed and keys must be non-negative, got {(seed, *keys)}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *keys])))
