"""Feature masks and their complementary counterparts.

Two generators are provided.  :class:`AttentionMaskNet` derives the mask
logits from the data, averaging ``W2 tanh(W1 x + b1) + b2`` over the rows of
a batch.  :class:`VectorMask` keeps the logits as a free trainable vector.
In both cases the complementary mask is the softmax of the negated logits,
so its ranking is the exact reverse of the main mask's ranking.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .nn import Dense, Tanh
from .tensor import Rng, ShapeError, as_matrix, softmax


@dataclass
class MaskPair:
    m: np.ndarray
    m_comp: np.ndarray
    logits: np.ndarray

    @classmethod
    def from_logits(cls, logits):
        logits = as_matrix(logits)[0]
        return cls(softmax(logits), softmax(-logits), logits)


def softmax_backward(s, ds):
    """Vector-Jacobian product of softmax at output ``s``."""
    return s * (ds - np.dot(ds, s))


class AttentionMaskNet:
    """Batch-averaged attention mask generator (D -> H tanh -> D linear).

    The second layer starts at zero so every feature begins with the same
    score and the main and complementary masks are both uniform.
    """

    kind = "attention"

    def __init__(self, n_features: int, hidden: int | None = None, rng: Rng | None = None):
        hidden = n_features if hidden is None else hidden
        rng = Rng(0) if rng is None else rng
        self.n_features = n_features
        self.hidden = hidden
        self.dense1 = Dense(n_features, hidden, rng.derive("dense1"))
        self.act = Tanh()
        self.dense2 = Dense(hidden, n_features, init="zeros")

    def params(self):
        return {
            "dense1.W": self.dense1.W, "dense1.b": self.dense1.b,
            "dense2.W": self.dense2.W, "dense2.b": self.dense2.b,
        }

    def _check(self, x):
        x = as_matrix(x)
        if x.shape[0] == 0:
            raise ValueError("mask generation needs at least one row")
        if x.shape[1] != self.n_features:
            raise ShapeError("AttentionMaskNet", x.shape, (self.n_features,))
        return x

    def forward(self, x):
        """Logits z-bar for batch ``x`` and the cache needed by :meth:`backward`."""
        x = self._check(x)
        pre, c1 = self.dense1.forward(x)
        h, c2 = self.act.forward(pre)
        hbar = h.mean(axis=0, keepdims=True)
        zbar, c3 = self.dense2.forward(hbar)
        return zbar[0], (c1, c2, c3, x.shape[0])

    def backward(self, dzbar, cache):
        c1, c2, c3, n = cache
        dhbar, g2 = self.dense2.backward(np.asarray(dzbar)[None, :], c3)
        dh = np.repeat(dhbar / n, n, axis=0)
        dpre = self.act.backward(dh, c2)
        _, g1 = self.dense1.backward(dpre, c1)
        return {"dense1.W": g1["W"], "dense1.b": g1["b"], "dense2.W": g2["W"], "dense2.b": g2["b"]}

    def hidden_sum(self, x):
        """Sum over rows of the tanh layer (used for chunked full-data means)."""
        x = self._check(x)
        return np.tanh(x @ self.dense1.W + self.dense1.b).sum(axis=0)

    def logits_from_hidden_mean(self, hbar):
        return hbar @ self.dense2.W + self.dense2.b

    def architecture(self):
        return {"kind": self.kind, "n_features": self.n_features, "hidden": self.hidden}


class VectorMask:
    """Directly trainable mask logits (the DFS-style variant).

    The main path is gated by the raw vector itself, the complementary path by
    ``softmax(-v)``.  Rankings and exports use ``softmax(v)``.
    """

    kind = "vector"

    def __init__(self, n_features: int, rng: Rng | None = None):
        rng = Rng(0) if rng is None else rng
        self.n_features = n_features
        self.logits = rng.uniform(0.0, 1.0, size=n_features)

    def params(self):
        return {"logits": self.logits}

    def architecture(self):
        return {"kind": self.kind, "n_features": self.n_features}


def mask_from_batch(net: AttentionMaskNet, batch) -> MaskPair:
    zbar, _ = net.forward(batch)
    return MaskPair.from_logits(zbar)


def mask_from_vector(v) -> MaskPair:
    logits = v.logits if isinstance(v, VectorMask) else np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("mask logits must be finite")
    return MaskPair.from_logits(np.array(logits, copy=True))


def mask_alt_design(m, n_features: int | None = None):
    """Alternative complementary mask ``(1 - m) / D``."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 1 or m.size == 0:
        raise ValueError("mask must be a non-empty vector")
    if np.any(m < 0) or abs(m.sum() - 1.0) > 1e-9:
        raise ValueError("mask must be a probability vector")
    d = m.size if n_features is None else n_features
    if d != m.size:
        raise ShapeError("mask_alt_design", m.shape, (d,))
    return (1.0 - m) / d


def full_dataset_mask(net, X, chunk_size: int = 4096) -> MaskPair:
    """Selection-time mask: logits averaged over all of ``X`` in streamed chunks."""
    if isinstance(net, VectorMask):
        return mask_from_vector(net)
    X = as_matrix(X)
    n = X.shape[0]
    if n == 0:
        raise ValueError("full_dataset_mask: empty dataset")
    if n <= chunk_size:
        return mask_from_batch(net, X)
    total = np.zeros(net.hidden)
    for start in range(0, n, chunk_size):
        total += net.hidden_sum(X[start:start + chunk_size])
    return MaskPair.from_logits(net.logits_from_hidden_mean(total / n))


def write_mask_csv(path, pair: MaskPair):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index", "m", "m_comp"])
        for i, (a, b) in enumerate(zip(pair.m, pair.m_comp)):
            w.writerow([i, repr(float(a)), repr(float(b))])


def read_mask_csv(path):
    """Return ``(m, m_comp)`` arrays from a mask CSV."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][:3] != ["index", "m", "m_comp"]:
        raise ValueError(f"{path}: missing 'index,m,m_comp' header")
    body = rows[1:]
    if [int(r[0]) for r in body] != list(range(len(body))):
        raise ValueError(f"{path}: indices must run 0..D-1 in order")
    m = np.array([float(r[1]) for r in body])
    mc = np.array([float(r[2]) for r in body])
    return m, mc


def mask_to_gray(values, height: int, width: int):
    """Min-max scale a mask to uint8 [0, 255] as a (height, width) image."""
    v = np.asarray(values, dtype=np.float64)
    if height * width != v.size:
        raise ShapeError("heatmap", v.shape, (height, width))
    lo, hi = v.min(), v.max()
    if hi == lo:
        img = np.full(v.shape, 128, dtype=np.uint8)
    else:
        img = np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)
    return img.reshape(height, width)


def write_pgm(path, values, height: int, width: int):
    """Binary (P5) PGM heatmap of a mask."""
    img = mask_to_gray(values, height, width)
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        f.write(img.tobytes())
