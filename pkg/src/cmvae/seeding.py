"""Deterministic seed derivation.

All randomness in the library flows from explicit integer seeds through
these helpers.  Estimator noise is keyed on the *content* of the item being
scored (hash of its observation bytes) rather than its batch position, so
per-item estimates are invariant to batch permutation and to the
composition of the surrounding batch.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK63 = (1 << 63) - 1


def derive_rng(*keys: int) -> np.random.Generator:
    """Generator keyed on a tuple of non-negative integers."""
    return np.random.default_rng([int(k) & MASK63 for k in keys])


def tag(name: str) -> int:
    """Stable integer tag for a named randomness stream."""
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little") & MASK63


def content_key(*rows: np.ndarray) -> int:
    """Order-insensitive hash of the row contents.

    Per-row digests are combined by XOR, so the key of a multimodal pair
    does not depend on which modality is listed first; swapping modality
    roles then reuses the same noise draws.
    """
    acc = 0
    for row in rows:
        digest = hashlib.blake2b(
            np.ascontiguousarray(row, dtype=np.float64).tobytes(), digest_size=8).digest()
        acc ^= int.from_bytes(digest, "little")
    return acc & MASK63


_SM_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_SM_MUL2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    """Vectorized SplitMix64 finalizer (uint64 arithmetic wraps by design)."""
    with np.errstate(over="ignore"):
        z = np.asarray(x, dtype=np.uint64) + _SM_GAMMA
        z = (z ^ (z >> np.uint64(30))) * _SM_MUL1
        z = (z ^ (z >> np.uint64(27))) * _SM_MUL2
        return z ^ (z >> np.uint64(31))


def per_row_normal(seed: int, stream: str, rows: list[tuple[np.ndarray, ...]],
                   shape: tuple) -> np.ndarray:
    """Standard-normal noise of `(len(rows), *shape)`, keyed per row content.

    Counter-based (SplitMix64 streams fed through Box-Muller) so the whole
    block is produced in a few vectorized passes instead of one generator
    per row.
    """
    keys = np.array([content_key(*row) for row in rows], dtype=np.uint64)
    stream_mix = _splitmix64(np.uint64((seed & MASK63) ^ tag(stream)))
    base = _splitmix64(keys ^ stream_mix)

    count = int(np.prod(shape)) if shape else 1
    half = (count + 1) // 2
    j = np.arange(1, half + 1, dtype=np.uint64)
    s1 = _splitmix64(base[:, None] + (np.uint64(2) * j) * _SM_GAMMA)
    s2 = _splitmix64(base[:, None] + (np.uint64(2) * j + np.uint64(1)) * _SM_GAMMA)
    u1 = ((s1 >> np.uint64(11)).astype(np.float64) + 1.0) * (2.0 ** -53)  # in (0, 1]
    u2 = (s2 >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)          # in [0, 1)
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = (2.0 * np.pi) * u2
    pair = np.empty((len(rows), 2 * half), dtype=np.float64)
    pair[:, 0::2] = radius * np.cos(angle)
    pair[:, 1::2] = radius * np.sin(angle)
    return pair[:, :count].reshape((len(rows),) + tuple(shape))
