"""Seeded, splittable random streams.

Every stream is a numpy ``Philox`` counter-based generator keyed by
``SeedSequence([seed, *path])``; string path components are mapped to
integers with CRC-32.  A stream therefore depends only on (seed, path), never
on how many numbers other streams have consumed, e.g.
``stream(seed, "gates", epoch, batch)``.
"""
import zlib

import numpy as np


def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    part = int(part)
    if part < 0:
        raise ValueError("stream path components must be non-negative")
    return part


def stream(seed, *path):
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), *(_key(p) for p in path)])
    return np.random.Generator(np.random.Philox(ss))
