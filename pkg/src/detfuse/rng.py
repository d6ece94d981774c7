"""Portable seeded random streams.

All randomness goes through PCG64 seeded by a ``SeedSequence`` whose spawn
key encodes the purpose of the stream (op name, image id, ...), so streams
are independent of call order and identical across platforms.
"""

import zlib

import numpy as np


def stream_key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def make_rng(seed: int, *keys) -> np.random.Generator:
    if seed is None:
        raise ValueError("a seed is required for stochastic operations")
    ss = np.random.SeedSequence(int(seed) & ((1 << 64) - 1), spawn_key=tuple(stream_key(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))
