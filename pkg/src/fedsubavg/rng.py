"""Child random streams derived from one root seed.

A stream is keyed by a purpose tag plus integers (round, client id, ...), so
the draws a client sees do not depend on how work is scheduled.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def child_seed(root: int, tag: str, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(root) & 0xFFFFFFFF, int(root) >> 32, _tag(tag), *map(int, keys)])


def child_rng(root: int, tag: str, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(child_seed(root, tag, *keys)))
