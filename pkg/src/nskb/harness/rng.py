"""Named, independent random streams derived from a cell seed.

A stream is a Philox generator keyed by ``SeedSequence([seed, crc32(name)])``,
so each (seed, name) pair always yields the same sequence regardless of how
many other streams exist or in which order cells execute.
"""
from __future__ import annotations

import zlib

import numpy as np

__all__ = ["stream", "STREAMS"]

#: Stream names used by the runner.
STREAMS = ("environment", "learner", "scheduler", "network")


def stream(seed: int, name: str) -> np.random.Generator:
    """Generator for the named sub-stream of ``seed``."""
    if int(seed) < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), key])))
