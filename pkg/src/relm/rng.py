"""Seeded randomness with named, independent substreams."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("init", "masking", "noise", "dropout", "sampling")


def _stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class Rng:
    """A 64-bit seed plus lazily created generators, one per use-site.

    ``rng.stream("masking")`` always returns the same generator object for
    a given ``Rng`` instance, so draws advance; a fresh ``Rng(seed)`` replays
    them. Substream seeds depend only on ``(seed, name)``.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            ss = np.random.SeedSequence([self.seed & 0xFFFFFFFF, self.seed >> 32, _stream_key(name)])
            gen = np.random.Generator(np.random.PCG64(ss))
            self._streams[name] = gen
        return gen

    def child(self, name: str) -> "Rng":
        """Derive an independent ``Rng`` (own substreams) keyed by ``name``."""
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFF, self.seed >> 32, _stream_key("child:" + name)])
        lo, hi = ss.generate_state(2, dtype=np.uint32)
        return Rng(int(lo) | (int(hi) << 32))

    def __repr__(self):
        return f"Rng(seed={self.seed})"
