"""Seeded random streams.

Every stochastic call asks for a generator keyed by (master_seed, tag,
extra ints). Streams come from numpy's SeedSequence spawning feeding PCG64,
so two tags never share a stream and a run is reproducible from one seed.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_words(tag: str) -> list[int]:
    raw = tag.encode("utf-8")
    return [zlib.crc32(raw), zlib.adler32(raw), len(raw)]


def stream(master_seed: int, tag: str, *extra: int) -> np.random.Generator:
    words = [int(master_seed) & 0xFFFFFFFF, (int(master_seed) >> 32) & 0xFFFFFFFF]
    words += _tag_words(tag)
    words += [int(e) & 0xFFFFFFFF for e in extra]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))
