"""Deterministic, stream-indexed random state.

All randomness in the library flows through :class:`RngState`, a thin
wrapper around numpy's counter-based Philox bit generator.  A state is
fully described by ``(seed, stream)``: two states built from the same pair
produce identical draw sequences on every platform, and states derived
with :meth:`derive` are statistically independent of each other.

Call sites that need several independent sources (init, masking, dropout,
shuffling, ...) derive one child state per purpose instead of sharing a
mutable generator, which keeps runs reproducible regardless of how much
randomness any one consumer uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    # Finalizer from SplitMix64; mixes an index into a well-spread 64-bit word.
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class RngState:
    """Immutable handle on a deterministic random stream."""

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        """Fresh numpy Generator keyed by (seed, stream).

        Repeated calls return generators that replay the same sequence.
        """
        key = [self.seed & _MASK64, self.stream & _MASK64]
        return np.random.Generator(np.random.Philox(key=key))

    def derive(self, *indices: int) -> "RngState":
        """Child state for a sub-purpose, independent per index tuple."""
        s = self.stream & _MASK64
        for i in indices:
            s = _splitmix64(s ^ _splitmix64(i & _MASK64))
        return RngState(seed=self.seed, stream=s)


class RngCursor:
    """Hands out one fresh generator per call, in a reproducible order.

    Used inside model forward passes where each dropout site needs its own
    independent draw but the whole pass must replay exactly from the base
    state.
    """

    def __init__(self, base: RngState):
        self.base = base
        self._n = 0

    def next_state(self) -> RngState:
        state = self.base.derive(self._n)
        self._n += 1
        return state

    def next_generator(self) -> np.random.Generator:
        return self.next_state().generator()
