"""Deterministic counter-based random streams.

Every sampling decision in a run draws from a stream derived purely from
integer/string components (run seed, trajectory id, step index), so results
are independent of scheduling, routing layout, and platform.
"""
from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _fold_str(state: int, text: str) -> int:
    h = _FNV_OFFSET
    for b in text.encode("utf-8"):
        h = ((h ^ b) * _FNV_PRIME) & _MASK
    return _mix((state + h) & _MASK)


class Stream:
    """SplitMix64 generator; identical output on every platform."""

    __slots__ = ("_state",)

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK
        return _mix(self._state)

    def next_double(self) -> float:
        """Uniform double in [0, 1), a multiple of 2**-53."""
        return (self.next_u64() >> 11) * 2.0**-53

    def next_below(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        return (self.next_u64() * n) >> 64

    def doubles(self, n: int) -> np.ndarray:
        return np.array([self.next_double() for _ in range(n)], dtype=np.float64)

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.next_below(i + 1)
            items[i], items[j] = items[j], items[i]

    def choice(self, items):
        return items[self.next_below(len(items))]


def derive_stream(*components: int | str) -> Stream:
    """Build a stream from mixed components; order-sensitive and collision-resistant."""
    state = 0
    for comp in components:
        if isinstance(comp, str):
            state = _fold_str(state, comp)
        else:
            state = _mix((state + (comp & _MASK) + _GAMMA) & _MASK)
    return Stream(_mix(state ^ _GAMMA))
