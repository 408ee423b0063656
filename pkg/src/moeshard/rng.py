"""Seedable SplitMix64 generator.

The generator is deliberately tiny so that other implementations can replay
the exact same streams:

* state is a 64-bit unsigned integer, initialised to the seed;
* each draw adds ``GAMMA = 0x9E3779B97F4A7C15`` to the state (mod 2**64) and
  returns ``mix(state)``, where ``mix`` is the SplitMix64 finaliser
  (xor-shift 30, multiply ``0xBF58476D1CE4E5B9``, xor-shift 27, multiply
  ``0x94D049BB133111EB``, xor-shift 31);
* a uniform double in [0, 1) is ``(word >> 11) * 2**-53``;
* a standard normal consumes two uniforms ``u1, u2`` and returns
  ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`` (Box-Muller, cosine branch only);
* a categorical draw with probabilities ``p`` returns the first index whose
  running sum of ``p`` exceeds one uniform.

Because each word depends only on the seed and the draw counter, blocks of
draws are generated with vectorised numpy arithmetic.
"""

from __future__ import annotations

import numpy as np

MASK = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    z &= MASK
    z = ((z ^ (z >> 30)) * _M1) & MASK
    z = ((z ^ (z >> 27)) * _M2) & MASK
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """Fold integer ``keys`` into ``seed`` to name an independent stream."""
    h = seed & MASK
    for k in keys:
        h = mix64(h ^ mix64(((k + 1) * GAMMA) & MASK))
    return h


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK

    def next_words(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self.state) + steps * np.uint64(GAMMA)
        self.state = (self.state + n * GAMMA) & MASK
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
        return z ^ (z >> np.uint64(31))

    def next_word(self) -> int:
        return int(self.next_words(1)[0])

    def uniform(self, n: int) -> np.ndarray:
        return (self.next_words(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        u = self.uniform(2 * n)
        return np.sqrt(-2.0 * np.log1p(-u[0::2])) * np.cos(2.0 * np.pi * u[1::2])

    def categorical(self, p: np.ndarray, n: int) -> np.ndarray:
        cdf = np.cumsum(np.asarray(p, dtype=np.float64))
        idx = np.searchsorted(cdf, self.uniform(n), side="right")
        return np.minimum(idx, len(cdf) - 1).astype(np.int64)
