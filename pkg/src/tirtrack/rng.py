"""Seeded random streams.

All randomness comes from numpy's Philox4x64-10 counter-based bit generator.
A stream is identified by ``(seed, *tags)``: the integer seed becomes the
``SeedSequence`` entropy and the tags (ints, or strings hashed with CRC-32)
become its ``spawn_key``. Independent jobs therefore get independent streams
without sharing any state.
"""
from __future__ import annotations

import zlib

import numpy as np


def _tag(t) -> int:
    if isinstance(t, (int, np.integer)):
        return int(t)
    return zlib.crc32(str(t).encode("utf-8"))


def stream(seed: int, *tags) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_tag(t) for t in tags))
    return np.random.Generator(np.random.Philox(ss))
