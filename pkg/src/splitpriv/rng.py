"""Counter-based random streams addressed by a hierarchical path.

Every stream is a Philox generator whose 128-bit key is a hash of
``(seed, *path)``. Two streams with the same seed and path replay the same
draws; any other path gives an unrelated key, so draws never depend on the
order in which streams are created or consumed.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np


class RngStream:
    def __init__(self, seed: int, path: tuple = ()):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.path = tuple(path)

    def child(self, *parts) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(parts))

    @property
    def key(self) -> int:
        blob = json.dumps([self.seed, *self.path], default=str).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:16], "little")

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at counter zero for this path."""
        return np.random.Generator(np.random.Philox(key=self.key))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path!r})"


def as_stream(rng, default_seed: int = 0) -> RngStream:
    """Accept an RngStream, an int seed, or None."""
    if isinstance(rng, RngStream):
        return rng
    if rng is None:
        return RngStream(default_seed)
    return RngStream(int(rng))
