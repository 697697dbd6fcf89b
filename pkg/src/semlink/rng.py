"""Seeded 64-bit generator used for every random draw in semlink.

The stream is SplitMix64: a Weyl counter advanced by the golden-ratio
increment ``0x9E3779B97F4A7C15`` and finalized with two xorshift-multiply
rounds. Because each output depends only on the counter, bulk draws are
computed with vectorized numpy ``uint64`` arithmetic and the stream is easy
to replicate in any language::

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out = z ^ (z >> 31)

Floats in [0, 1) use the top 53 bits; 32-bit floats use the top 24 bits.
"""

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class Rng:
    """Deterministic SplitMix64 stream.

    Example:
        >>> r = Rng(7)
        >>> int(r.u64(1)[0]) == int(Rng(7).u64(1)[0])
        True
    """

    def __init__(self, seed):
        self.state = int(seed) & _MASK64

    def u64(self, n):
        n = int(n)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self.state) + steps * _GAMMA
        self.state = (self.state + n * int(_GAMMA)) & _MASK64
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))

    def random(self, n):
        """``n`` float64 values in [0, 1)."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def random_f32(self, n):
        """``n`` float32 values in [0, 1); exact multiples of 2**-24."""
        return ((self.u64(n) >> np.uint64(40)).astype(np.float32)
                * np.float32(1.0 / (1 << 24)))

    def uniform(self):
        return float(self.random(1)[0])

    def integers(self, high, n):
        """``n`` integers uniform on [0, high)."""
        return np.floor(self.random(n) * high).astype(np.int64)

    def integer(self, high):
        return int(self.integers(high, 1)[0])

    def normal(self, n):
        """``n`` standard normal draws (Box-Muller)."""
        m = (int(n) + 1) // 2
        u1 = 1.0 - self.random(m)  # (0, 1]
        u2 = self.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n]

    def permutation(self, n):
        """Fisher-Yates shuffle of ``range(n)``."""
        return self.sample_indices(n, n)

    def sample_indices(self, n, k):
        """``k`` distinct indices from ``range(n)``, uniformly, via partial Fisher-Yates."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct items from {n}")
        idx = np.arange(n)
        u = self.random(k)
        for i in range(k):
            j = i + int(u[i] * (n - i))
            idx[i], idx[j] = idx[j], idx[i]
        return idx[:k].copy()

    def spawn(self):
        """Independent child generator seeded from this stream."""
        return Rng(int(self.u64(1)[0]))
