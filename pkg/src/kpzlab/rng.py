"""Counter-based random number streams.

Every draw is keyed by (master_seed, stream_tag, replica, step), so replicas
can run on any worker in any order and still reproduce bit-identically.
Streams with distinct keys never overlap (Philox counter blocks).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# stream tags keep solver noise, oracle paths, and test draws disjoint
TAG_NOISE = 1
TAG_FK_PATHS = 2
TAG_SYNTHETIC = 3


@dataclass(frozen=True)
class SeedLineage:
    """Provenance of one random draw."""

    master_seed: int
    replica: int
    step: int
    tag: int = TAG_NOISE


def _u64(x: int) -> int:
    return int(x) & 0xFFFFFFFFFFFFFFFF


def generator(master_seed: int, replica: int, step: int, tag: int = TAG_NOISE) -> np.random.Generator:
    """Philox generator at a fixed counter block for the given key."""
    key = np.array([_u64(master_seed), _u64(tag)], dtype=np.uint64)
    counter = np.array([0, 0, _u64(replica), _u64(step)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


def white_field(shape: tuple[int, ...], master_seed: int, replica: int, step: int,
                tag: int = TAG_NOISE) -> np.ndarray:
    """Standard-normal lattice field for the given lineage key."""
    return generator(master_seed, replica, step, tag).standard_normal(shape)
