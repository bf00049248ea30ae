"""Counter-based random streams.

Every stochastic quantity is drawn from a Philox generator keyed by a seed plus
a tuple of stream labels, so independent trajectories (and resumed runs) never
share state.
"""
from __future__ import annotations

import zlib

import numpy as np


def _label(x: int | str) -> int:
    if isinstance(x, str):
        return zlib.crc32(x.encode("utf-8"))
    return int(x)


def stream(seed: int, *labels: int | str) -> np.random.Generator:
    """Philox generator for ``(seed, *labels)``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_label(x) for x in labels]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
