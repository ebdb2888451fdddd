"""Deterministic random substreams.

Every stochastic stage draws from its own generator derived from the run seed and a
tuple of integer keys, so adding or reordering stages never shifts another stage's
draws.
"""
from typing import Dict

import numpy as np

# Stage identifiers used as the last spawn key.
STAGES: Dict[str, int] = {
    "rstar": 0,
    "lengths": 1,
    "base_policy": 2,
    "partitions": 3,
    "pretrain": 4,
    "estep": 10,
    "select": 11,
    "pseudo": 12,
    "metrics": 13,
    "transfer": 14,
    "fresh_policy": 15,
}


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Return a generator for ``(seed, *keys)``.

    Args:
        seed: 64-bit unsigned run seed
        keys: nonnegative integers naming the substream

    Returns:
        A fresh PCG64 generator; equal arguments give identical streams.
    """
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(keys)))
    )


def stage_rng(seed: int, stage: str, *keys: int) -> np.random.Generator:
    """Generator for a named stage, optionally keyed by round/iteration."""
    return derive_rng(seed, *keys, STAGES[stage])


def child_seed(rng: np.random.Generator) -> int:
    """Draw a seed from ``rng`` for code that needs to replay a stream."""
    return int(rng.integers(0, 2**63 - 1))
