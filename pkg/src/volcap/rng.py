"""Seed plumbing: one global seed, per-module named substreams.

Substreams are derived from (seed, crc32(name)) so adding draws in one
module never perturbs another module's stream.
"""

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Deterministic generator for a named substream of the global seed."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))


def substream_seed(seed: int, name: str) -> int:
    """A 63-bit integer seed for libraries that want a plain int (torch)."""
    return int(substream(seed, name).integers(0, 2**63 - 1))
