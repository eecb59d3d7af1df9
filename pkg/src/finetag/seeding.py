"""Seed fan-out.

One integer seed per invocation is split into named, independent streams:
``stream(seed, name)`` seeds a PCG64 generator with
``SeedSequence([seed, crc32(name)])``. Adding a new consumer never perturbs
the draws seen by existing ones.
"""

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8")) & 0xFFFFFFFF
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), key])))
