"""Counter-based random streams keyed by (seed, stream name, counter).

Each named stream is an independent Philox generator, so drawing from one
stream (say, evaluation) never shifts the values another (training) sees.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


def stream(seed: int, name: str, counter: int = 0) -> np.random.Generator:
    """Independent generator for ``name`` under ``seed``, positioned at ``counter``."""
    bits = np.random.Philox(key=stream_key(seed, name), counter=int(counter))
    return np.random.Generator(bits)
