"""Seeded random streams for reproducible experiment cells."""

from dataclasses import dataclass

import numpy as np

STREAM_NAMES = ("setup", "rounds", "policy", "baseline")


@dataclass
class RngStreams:
    """Independent generators derived from one integer seed."""
    seed: int
    setup: np.random.Generator
    rounds: np.random.Generator
    policy: np.random.Generator
    baseline: np.random.Generator


def make_streams(seed: int) -> RngStreams:
    """
    Spawn one generator per concern from a single seed.

    Every (policy, seed) cell that shares a seed sees the same setup and round
    streams, so policies are compared on identical rounds.

    Args:
        seed: Non-negative integer seed

    Returns:
        RngStreams: Named generators
    """
    children = np.random.SeedSequence(seed).spawn(len(STREAM_NAMES))
    generators = {name: np.random.default_rng(child) for name, child in zip(STREAM_NAMES, children)}
    return RngStreams(seed=seed, **generators)


def int_seed(rng: np.random.Generator) -> int:
    """Draw an integer seed for libraries that do not accept a Generator."""
    return int(rng.integers(0, 2**31 - 1))
