"""Counter-based random streams: per-path noise reproducible independent of batching."""

import numpy as np

_MASK64 = (1 << 64) - 1

# Stream tags keep independent uses of the same seed from colliding.
STREAM_MARKET = 0
STREAM_POLICY_NOISE = 1
STREAM_TRAIN = 2


def philox_key(seed: int, stream: int = 0) -> int:
    return ((stream & _MASK64) << 64) | (seed & _MASK64)


def path_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Independent Philox generator for (seed, stream); same inputs, same draws."""
    return np.random.Generator(np.random.Philox(key=philox_key(int(seed), stream)))


def derive_seed(*parts: int) -> int:
    """Mix integer components into one 64-bit seed (splitmix64 chain)."""
    h = 0x9E3779B97F4A7C15
    for p in parts:
        h = ((h ^ (int(p) & _MASK64)) * 0xBF58476D1CE4E5B9) & _MASK64
        h ^= h >> 27
        h = (h * 0x94D049BB133111EB) & _MASK64
        h ^= h >> 31
    return h
