import hashlib

import numpy as np

_SEED_BITS = 32


def derive_seed(master: int, *keys) -> int:
    """
    Derive a sub-seed from the master seed and a key path.

    The same (master, keys) always yields the same seed, so a single window,
    repeat or search trial can be rerun in isolation.

    Args:
        master (int): Experiment seed.
        *keys: Counter path, e.g. ("window", 2012, "trial", 7).

    Returns:
        int: Seed in [0, 2**32 - 1].
    """
    if isinstance(master, bool) or not isinstance(master, (int, np.integer)):
        raise TypeError(f"master seed must be int, got {type(master).__name__}")
    key = "/".join([str(int(master))] + [str(k) for k in keys])
    hash_number = int(hashlib.md5(key.encode()).hexdigest(), 16)
    return hash_number % (2 ** _SEED_BITS)
