"""Deterministic random-stream derivation.

Every stochastic operation takes an explicit numpy Generator. Streams for
distinct purposes are derived from one root seed plus string tags, so runs
are reproducible end to end and adding a new consumer never shifts the
draws of an existing one.
"""

from __future__ import annotations

import zlib

import numpy as np


def child_rng(seed: int, *tags: str | int) -> np.random.Generator:
    """Generator for (seed, tags); same arguments always give the same stream."""
    key = tuple(
        t if isinstance(t, int) else zlib.crc32(t.encode("utf-8")) for t in tags
    )
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))
