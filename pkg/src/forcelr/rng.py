"""Seeded random streams.

All randomness derives from one integer seed.  Each consumer asks for a named
stream; the name is hashed (CRC-32, stable across platforms and Python
versions) into the ``spawn_key`` of a numpy ``SeedSequence`` and the stream is
a ``PCG64`` bit generator: a 128-bit-state permuted congruential generator
with 64-bit output.  Independent streams therefore never share state, and
adding a new consumer never shifts the numbers an existing one sees.
"""
from __future__ import annotations

import zlib

import numpy as np

GENERATOR = "pcg64"


def stream_key(name: str, *extra: int) -> tuple[int, ...]:
    return (zlib.crc32(name.encode("utf-8")),) + tuple(int(e) for e in extra)


def make_rng(seed: int, name: str = "default", *extra: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=stream_key(name, *extra))
    return np.random.Generator(np.random.PCG64(ss))
