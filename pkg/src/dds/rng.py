"""Seeded randomness with independent named streams.

One run seed fans out into per-purpose numpy Generators, keyed by name, so
adding randomness to one component never perturbs another.  Stream
derivation hashes the name itself (not creation order) and is therefore
stable across runs and platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _stream_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class RunRNG:
    """Root of all randomness for one run."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        """Return the generator for `name`, creating it on first use."""
        gen = self._streams.get(name)
        if gen is None:
            gen = self.fresh(name)
            self._streams[name] = gen
        return gen

    def fresh(self, name: str) -> np.random.Generator:
        """A brand-new generator for `name`, independent of stream() state."""
        seq = np.random.SeedSequence([self.seed, _stream_key(name)])
        return np.random.Generator(np.random.PCG64(seq))
