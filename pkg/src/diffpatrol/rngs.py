"""Deterministic RNG stream derivation.

Every sampling operation in the package takes an explicit
``numpy.random.Generator``. Parallel work must use disjoint streams derived
here so that serial and parallel executions of the same job set produce
identical results.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _token_words(token: str | int) -> list[int]:
    if isinstance(token, int):
        return [token & 0xFFFFFFFF, (token >> 32) & 0xFFFFFFFF]
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def seed_sequence(base_seed: int, *tokens: str | int) -> np.random.SeedSequence:
    """Build a SeedSequence keyed on a base seed plus arbitrary job tokens."""
    entropy = [base_seed & 0xFFFFFFFFFFFFFFFF]
    for token in tokens:
        entropy.extend(_token_words(token))
    return np.random.SeedSequence(entropy)


def derive_rng(base_seed: int, *tokens: str | int) -> np.random.Generator:
    """Deterministic per-job generator, e.g. ``derive_rng(seed, method, instance)``."""
    return np.random.default_rng(seed_sequence(base_seed, *tokens))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Split ``n`` independent child streams off an existing generator."""
    return list(rng.spawn(n))
