"""Dense 2-D float64 arithmetic and a self-contained seeded generator.

Matrices are plain ``numpy.ndarray`` objects of dtype float64, row-major,
laid out sample-major (N x D).  The helpers here add the shape checking
and numerical-stability guarantees the rest of the package relies on.

Random numbers come from :class:`Rng`, a counter-based SplitMix64
generator.  The i-th raw output of a generator seeded with ``s`` is::

    z = s + (i + 1) * 0x9E3779B97F4A7C15          (mod 2**64)
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9      (mod 2**64)
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB      (mod 2**64)
    out = z ^ (z >> 31)

which is exactly the sequence produced by the reference SplitMix64
(Steele, Lea & Flood 2014), only evaluated in vectorised blocks.  Only
64-bit integer arithmetic is involved, so raw draws, uniforms, bounded
integers and permutations are bit-identical on every platform.
"""

from __future__ import annotations

import hashlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        desc = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


def as_matrix(a) -> np.ndarray:
    """Return ``a`` as a 2-D float array (1-D input becomes a single row).

    Float64 is the working precision; wider float input (``np.longdouble``)
    is kept so that finite-difference oracles can run in extended precision.
    """
    arr = np.asarray(a)
    if not np.issubdtype(arr.dtype, np.floating) or arr.dtype.itemsize < 8:
        arr = arr.astype(np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeError("as_matrix", arr.shape)
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def softmax_rows(a) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction."""
    a = as_matrix(a)
    z = a - a.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax(v) -> np.ndarray:
    """Softmax of a single vector."""
    v = as_matrix(v)[0]
    return softmax_rows(v[None, :])[0]


_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(a, b, op: str) -> np.ndarray:
    """Entrywise ``op`` of equal-shape matrices, or ``b`` broadcast as one row."""
    if op not in _OPS:
        raise ValueError(f"unknown elementwise op {op!r}")
    a = as_matrix(a)
    b = as_matrix(b)
    if b.shape != a.shape and not (b.shape[0] == 1 and b.shape[1] == a.shape[1]):
        raise ShapeError(f"elementwise[{op}]", a.shape, b.shape)
    return _OPS[op](a, b)


def _splitmix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _stable_hash(key: str) -> int:
    return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "little")


class Rng:
    """Counter-based SplitMix64 generator.

    ``seed`` is any integer (reduced mod 2**64).  The generator owns a single
    counter; every draw consumes as many counter values as raw words it needs.
    Instances are single-owner and not thread-safe.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def __repr__(self):
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def derive(self, key) -> "Rng":
        """Independent child stream named by ``key``; does not advance self."""
        z = np.array([self.seed ^ _stable_hash(str(key))], dtype=np.uint64)
        return Rng(int(_splitmix(z + _GOLDEN)[0]))

    def raw(self, n: int) -> np.ndarray:
        """``n`` raw 64-bit words."""
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * _GOLDEN
            return _splitmix(z)

    def random(self, size=None):
        """Uniform floats in [0, 1) with 53 bits of resolution."""
        n = 1 if size is None else int(np.prod(size))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return float(u[0]) if size is None else u.reshape(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        u = self.random(size)
        return low + (high - low) * u

    def integers(self, lo: int, hi: int, size=None):
        """Integers uniform on the closed range [lo, hi] (unbiased, by rejection)."""
        lo, hi = int(lo), int(hi)
        if lo > hi:
            raise ValueError(f"integers: empty range [{lo}, {hi}]")
        span = hi - lo + 1
        n = 1 if size is None else int(np.prod(size))
        if span > _MASK64:
            raise ValueError("integers: range wider than 2**64")
        limit = (1 << 64) - ((1 << 64) % span)
        out = np.empty(n, dtype=np.uint64)
        filled = 0
        while filled < n:
            draw = self.raw(n - filled)
            if limit <= _MASK64:
                draw = draw[draw < np.uint64(limit)]
            out[filled:filled + draw.size] = draw
            filled += draw.size
        vals = (out % np.uint64(span)).astype(np.int64) + lo
        return int(vals[0]) if size is None else vals.reshape(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        """Gaussian draws via Box-Muller (two words per value)."""
        n = 1 if size is None else int(np.prod(size))
        u1 = 1.0 - self.random(n)
        u2 = self.random(n)
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        z = loc + scale * z
        return float(z[0]) if size is None else z.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        """Uniform random permutation of ``range(n)`` (stable argsort of raw keys)."""
        return np.argsort(self.raw(n), kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)`` in random order."""
        if not 0 <= k <= n:
            raise ValueError(f"choice: cannot draw {k} of {n}")
        return self.permutation(n)[:k]
