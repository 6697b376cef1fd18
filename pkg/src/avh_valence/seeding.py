"""Deterministic derivation of component RNG streams from one master seed.

Every randomized stage derives its own stream as
``sha256("avh-valence:<master>:<tag>:<tag>...")`` -> SeedSequence entropy, so
any stage can be re-run in isolation and parallel execution order can never
change results.
"""

from __future__ import annotations

import hashlib

import numpy as np

_DOMAIN = "avh-valence"


def derive_seed_sequence(master_seed: int, *tags) -> np.random.SeedSequence:
    """SeedSequence for component `tags` under `master_seed`.

    Tags are stringified and joined; the sha256 digest's first 16 bytes
    become the entropy words.
    """
    key = ":".join([_DOMAIN, repr(int(master_seed))] + [str(t) for t in tags])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    words = np.frombuffer(digest[:16], dtype=np.uint32)
    return np.random.SeedSequence(entropy=[int(w) for w in words])


def derive_rng(master_seed: int, *tags) -> np.random.Generator:
    """PCG64 generator for component `tags` under `master_seed`."""
    return np.random.Generator(np.random.PCG64(derive_seed_sequence(master_seed, *tags)))


def derive_int_seed(master_seed: int, *tags) -> int:
    """Stable 63-bit integer seed for APIs that want a plain int."""
    key = ":".join([_DOMAIN, repr(int(master_seed))] + [str(t) for t in tags])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)
