"""Named random sub-streams fanned out from one top-level seed.

Every random choice in the pipeline (splitting, parameter init, shuffling,
augmentation) draws from its own stream, so a component can be reproduced in
isolation from just the root seed and the stream name.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(root_seed: int, name: str) -> np.random.SeedSequence:
    """Stable per-purpose seed: mixes the root seed with a CRC of the name."""
    return np.random.SeedSequence([int(root_seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))])


def substream(root_seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(root_seed, name)))
