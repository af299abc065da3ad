"""Counter-based random streams shared by every module.

All randomness in the package is a pure function of a key tuple such as
(master_seed, example_index, iteration_index, kind), so results never depend
on call order, chunking, or thread schedule.  The construction is SplitMix64:
the i-th raw word of a stream is ``mix64(key + (i+1) * GOLDEN)`` where
``mix64`` is the SplitMix64 finalizer.  String tags are folded into the key
with 64-bit FNV-1a.  Uniform doubles are ``(word >> 11) * 2**-53``, which is
exact in IEEE-754, so the dataset generator built on top of this is
reproducible bit-for-bit in any language.  The full recipe is documented in
README.md.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _mix64_int(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _fnv1a(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK
    return h


def derive_key(*tags) -> int:
    """Fold integer/string tags into a 64-bit stream key."""
    key = 0
    for tag in tags:
        if isinstance(tag, str):
            word = _fnv1a(tag)
        else:
            word = int(tag) & _MASK
        key = _mix64_int((key ^ word) + _GOLDEN)
    return key


class Stream:
    """Deterministic stream of draws for one key tuple.

    Draws advance an internal position, so a stream yields a fixed sequence;
    two streams with the same tags always agree element for element.
    """

    def __init__(self, *tags):
        self._key = derive_key(*tags)
        self._pos = 0

    def _words(self, n: int) -> np.ndarray:
        idx = np.arange(self._pos + 1, self._pos + n + 1, dtype=np.uint64)
        self._pos += n
        return _mix64_array(np.uint64(self._key) + idx * np.uint64(_GOLDEN))

    def uniform(self, shape=(), lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """Uniform doubles in [lo, hi); scalar output for shape ()."""
        n = int(np.prod(shape)) if shape else 1
        u = (self._words(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        out = lo + u * (hi - lo)
        return out.reshape(shape) if shape else float(out[0])

    def integers(self, lo: int, hi: int, shape=()) -> np.ndarray:
        """Uniform integers in [lo, hi), via floor(u * (hi - lo))."""
        if hi <= lo:
            raise ValueError(f"empty integer range [{lo}, {hi})")
        n = int(np.prod(shape)) if shape else 1
        u = (self._words(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        vals = lo + np.floor(u * (hi - lo)).astype(np.int64)
        return vals.reshape(shape) if shape else int(vals[0])

    def bernoulli(self, p: float, shape=()) -> np.ndarray:
        """Boolean draws, True with probability p."""
        n = int(np.prod(shape)) if shape else 1
        u = (self._words(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        out = u < p
        return out.reshape(shape) if shape else bool(out[0])

    def normal(self, shape=()) -> np.ndarray:
        """Standard normals via Box-Muller (not used by the dataset generator)."""
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        w1 = ((self._words(m) >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        w2 = (self._words(m) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(w1))
        theta = 2.0 * np.pi * w2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape) if shape else float(z[0])
