"""Named, seedable random streams.

``Streams(seed).get("init")`` always yields the same generator sequence for a
given ``(seed, name)`` pair regardless of which other streams were drawn, so
components stay independently reproducible.
"""

import zlib

import numpy as np


def _name_key(name):
    return zlib.crc32(name.encode("utf-8"))


class Streams:
    def __init__(self, seed, path=()):
        self.seed = int(seed)
        self.path = tuple(path)

    def _sequence(self, name):
        return np.random.SeedSequence([self.seed, *(_name_key(p) for p in self.path), _name_key(name)])

    def get(self, name):
        return np.random.default_rng(self._sequence(name))

    def child(self, name):
        """A sub-family of streams, e.g. one per bootstrap round."""
        return Streams(self.seed, self.path + (name,))

    def __repr__(self):
        return f"Streams(seed={self.seed}, path={self.path})"
