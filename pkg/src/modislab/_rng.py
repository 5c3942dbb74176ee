"""Deterministic random-stream derivation.

Every random draw in the package comes from a generator keyed by
``(seed, tag, *indices)``.  Streams are therefore independent of execution
order and identical across runs, processes and platforms, which is what the
bit-exact reproducibility contract relies on.
"""

import hashlib

import numpy as np


def _key_ints(parts):
    ints = []
    for part in parts:
        if isinstance(part, (int, np.integer)):
            ints.append(int(part) & 0xFFFFFFFFFFFFFFFF)
        else:
            digest = hashlib.sha256(str(part).encode("utf8")).digest()
            ints.append(int.from_bytes(digest[:8], "little"))
    return ints


def derive_rng(*parts) -> np.random.Generator:
    """Return a Generator keyed by the given (seed, tag, index...) tuple."""
    return np.random.default_rng(np.random.SeedSequence(_key_ints(parts)))
