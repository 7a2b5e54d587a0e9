"""Seeded, splittable random streams.

Every stream is a Philox (counter-based) generator keyed by a root seed and a
spawn path, so stream ``(seed, 7)`` is reproducible without creating streams
0..6 first.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int, *path: int) -> np.random.Generator:
    """Return the generator for ``seed`` at the given spawn path."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def substream(rng: np.random.Generator, *path: int) -> np.random.Generator:
    """Derive an independent child stream from an existing generator.

    The child depends only on the parent's seed sequence and ``path``, never on
    how many variates the parent has produced.
    """
    parent = rng.bit_generator.seed_seq
    key = tuple(parent.spawn_key) + tuple(int(p) for p in path)
    ss = np.random.SeedSequence(entropy=parent.entropy, spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def as_rng(rng_or_seed: np.random.Generator | int | None) -> np.random.Generator:
    if isinstance(rng_or_seed, np.random.Generator):
        return rng_or_seed
    if rng_or_seed is None:
        return np.random.Generator(np.random.Philox(np.random.SeedSequence()))
    return make_rng(int(rng_or_seed))
