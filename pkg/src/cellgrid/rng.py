"""SplitMix64 pseudo-random generator.

Deliberately tiny and specified here so runs are reproducible bit-for-bit
from a 64-bit seed, independent of Python/numpy versions and portable to
other languages:

    state <- (state + 0x9E3779B97F4A7C15) mod 2^64
    z <- state; z <- (z xor z>>30) * 0xBF58476D1CE4E5B9 mod 2^64
    z <- (z xor z>>27) * 0x94D049BB133111EB mod 2^64
    output <- z xor z>>31

``uniform()`` maps the top 53 bits onto [0, 1).  ``below(n)`` reduces a draw
modulo n (bias is irrelevant at these sizes and keeps the spec one line).
"""

from __future__ import annotations

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(master: int, *keys: int) -> int:
    """Deterministic child seed from a master seed and integer keys."""
    s = mix64(master)
    for k in keys:
        s = mix64(s ^ ((k * _GOLDEN) & _MASK))
    return s


class SplitMix64:
    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK
        return mix64(self.state)

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * 2.0 ** -53

    def below(self, n: int) -> int:
        return self.next_u64() % n
