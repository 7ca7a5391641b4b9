"""Deterministic named random streams.

Every source of randomness in a run (weight sampling, dropout masks, DP
noise, batch sampling, data generation) draws from its own stream, keyed
by a label path derived from one master seed.  Two runs that request the
same label path get bit-identical draws regardless of the order in which
other streams are consumed, which is what makes the centralized and
federated trainers consume identical randomness.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

__all__ = ["derive_seed", "stream", "NoiseRouter"]


def derive_seed(master_seed: int, *labels) -> int:
    """Hash a master seed and a label path into a 64-bit child seed."""
    h = hashlib.sha256()
    h.update(struct.pack("<q", int(master_seed) & 0x7FFFFFFFFFFFFFFF))
    for lab in labels:
        h.update(b"/")
        h.update(str(lab).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


def stream(master_seed: int, *labels) -> np.random.Generator:
    """Fresh generator for the given label path.

    Calling twice with the same labels returns generators that produce
    identical sequences; any label difference decorrelates them.
    """
    return np.random.default_rng(derive_seed(master_seed, *labels))


class NoiseRouter:
    """Hands out named streams under a fixed scope (e.g. one training round).

    A router scoped to ``("round", epoch, batch)`` gives every layer its
    per-round dropout / weight-sample / DP-noise stream.  Routers are cheap
    immutable values; deriving a child router never consumes randomness.
    """

    __slots__ = ("master_seed", "scope")

    def __init__(self, master_seed: int, scope: tuple = ()):
        self.master_seed = int(master_seed)
        self.scope = tuple(scope)

    def scoped(self, *labels) -> "NoiseRouter":
        return NoiseRouter(self.master_seed, self.scope + labels)

    def stream(self, *labels) -> np.random.Generator:
        return stream(self.master_seed, *self.scope, *labels)

    def __repr__(self):  # pragma: no cover
        return f"NoiseRouter(seed={self.master_seed}, scope={self.scope!r})"
