"""Counter-based random streams.

Every random quantity in the package is addressed by a path of integers
(seed, purpose, replication, ...) and an index ``s``.  A :class:`Stream` maps
the path to a Philox key; draw ``s`` of a stream always starts at counter
block ``s``, so it does not depend on how many other draws were taken or in
which order (serial or parallel) they were produced.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

# Named sub-streams.  Values are arbitrary but frozen: changing them changes results.
ZETA = 1
EDRAW = 2
DATA = 3
FIRST_STAGE = 4


def _label(name: int | str) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name)
    digest = hashlib.sha256(str(name).encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass(frozen=True)
class Stream:
    """A reproducible random stream identified by ``seed`` and a label path."""

    seed: int
    path: tuple[int, ...] = ()

    def child(self, *names: int | str) -> "Stream":
        return Stream(self.seed, self.path + tuple(_label(n) for n in names))

    @property
    def key(self) -> np.ndarray:
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        return ss.generate_state(2, dtype=np.uint64)

    def generator(self, s: int = 0) -> np.random.Generator:
        """Generator positioned at the start of draw ``s``."""
        bg = np.random.Philox(key=self.key, counter=[0, 0, int(s), 0])
        return np.random.Generator(bg)

    def normal_rows(self, kappa: int, dim: int, start: int = 0) -> np.ndarray:
        """Rows ``start .. start+kappa-1`` of standard normals, each of length ``dim``.

        Row ``s`` equals ``self.generator(s).standard_normal(dim)``.
        """
        out = np.empty((kappa, dim))
        if dim == 0:
            return out
        bg = np.random.Philox(key=self.key)
        gen = np.random.Generator(bg)
        state = bg.state
        for r in range(kappa):
            state["state"]["counter"][:] = (0, 0, start + r, 0)
            state["buffer_pos"] = 4
            state["has_uint32"] = 0
            bg.state = state
            out[r] = gen.standard_normal(dim)
        return out


def as_stream(seed: int | Stream) -> Stream:
    if isinstance(seed, Stream):
        return seed
    return Stream(int(seed))
