"""Hand-written layers, losses, Adam and a finite-difference gradient checker.

Layers follow a cache-passing convention: ``forward`` returns the output and
an opaque cache, ``backward`` consumes that cache.  One layer instance can
therefore be run on several inputs (the main and complementary paths) before
any backward pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .tensor import Rng, ShapeError, as_matrix, softmax_rows

LOG_EPS = 1e-12


def _need_cache(cache, layer):
    if cache is None:
        raise RuntimeError(f"{layer}.backward called before forward")


class Dense:
    """Affine layer ``y = x @ W + b`` with W of shape (n_in, n_out)."""

    def __init__(self, n_in: int, n_out: int, rng: Rng | None = None, init: str = "glorot"):
        self.n_in = n_in
        self.n_out = n_out
        if init == "glorot":
            if rng is None:
                raise ValueError("glorot init needs an Rng")
            limit = np.sqrt(6.0 / (n_in + n_out))
            self.W = rng.uniform(-limit, limit, size=(n_in, n_out))
        elif init == "zeros":
            self.W = np.zeros((n_in, n_out))
        else:
            raise ValueError(f"unknown init {init!r}")
        self.b = np.zeros(n_out)

    def params(self):
        return {"W": self.W, "b": self.b}

    def forward(self, x):
        x = as_matrix(x)
        if x.shape[1] != self.n_in:
            raise ShapeError("Dense.forward", x.shape, self.W.shape)
        return x @ self.W + self.b, x

    def backward(self, dy, cache):
        _need_cache(cache, "Dense")
        x = cache
        grads = {"W": x.T @ dy, "b": dy.sum(axis=0)}
        return dy @ self.W.T, grads


class Tanh:
    def forward(self, x):
        y = np.tanh(x)
        return y, y

    def backward(self, dy, cache):
        _need_cache(cache, "Tanh")
        return dy * (1.0 - cache * cache)


class LeakyReLU:
    def __init__(self, alpha: float = 0.02):
        self.alpha = alpha

    def forward(self, x):
        pos = x > 0
        return np.where(pos, x, self.alpha * x), pos

    def backward(self, dy, cache):
        _need_cache(cache, "LeakyReLU")
        return np.where(cache, dy, self.alpha * dy)


class Softmax:
    def forward(self, x):
        s = softmax_rows(x)
        return s, s

    def backward(self, dy, cache):
        _need_cache(cache, "Softmax")
        s = cache
        return s * (dy - (dy * s).sum(axis=1, keepdims=True))


def activation_forward(x, kind: str, alpha: float = 0.02):
    """Apply ``tanh``, ``leaky_relu`` or ``softmax`` (row-wise) to ``x``."""
    layer = {"tanh": Tanh(), "leaky_relu": LeakyReLU(alpha), "softmax": Softmax()}[kind]
    return layer.forward(as_matrix(x))[0]


class Dropout:
    """Inverted dropout: survivors are scaled by 1/(1-rate); eval mode is identity."""

    def __init__(self, rate: float = 0.3):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.training = False

    def sample_mask(self, shape, rng: Rng):
        keep = rng.random(shape) >= self.rate
        return keep / (1.0 - self.rate)

    def forward(self, x, mask=None, rng: Rng | None = None):
        if not self.training:
            return x, None
        if mask is None:
            if rng is None:
                raise ValueError("train-mode dropout needs a mask or an Rng")
            mask = self.sample_mask(x.shape, rng)
        return x * mask, mask

    def backward(self, dy, cache):
        return dy if cache is None else dy * cache


def one_hot(labels, n_classes: int):
    """One-hot rows for 1-based labels."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels - 1] = 1.0
    return out


def cross_entropy(pred, target):
    """Mean categorical cross entropy of probability rows against one-hot rows.

    Probabilities are clamped at ``LOG_EPS`` before the log.  Returns the loss
    and its gradient with respect to ``pred``.
    """
    pred = as_matrix(pred)
    target = as_matrix(target)
    if pred.shape != target.shape:
        raise ShapeError("cross_entropy", pred.shape, target.shape)
    n = pred.shape[0]
    clamped = np.maximum(pred, LOG_EPS)
    loss = -np.sum(target * np.log(clamped)) / n
    grad = np.where(pred > LOG_EPS, -target / clamped, 0.0) / n
    return loss, grad


def softmax_cross_entropy(logits, target):
    """Fused softmax + cross entropy; gradient w.r.t. logits is (p - t) / N."""
    p = softmax_rows(logits)
    loss, _ = cross_entropy(p, target)
    return loss, (p - target) / p.shape[0], p


class Adam:
    """Bias-corrected Adam over a dict of named parameter arrays (updated in place)."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"Adam.step[{name}]", p.shape, g.shape)
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: tuple
    n_checked: int
    tolerance: float | None = None

    @property
    def passed(self) -> bool:
        return self.tolerance is None or self.max_rel_error < self.tolerance


def grad_check(loss_and_grads, params, h: float = 1e-5, tolerance: float | None = None,
               loss=None, max_per_param: int | None = None, rng: Rng | None = None) -> GradCheckResult:
    """Compare analytic gradients with central finite differences.

    ``loss_and_grads()`` must evaluate the loss for the current contents of the
    arrays in ``params`` and return ``(loss, grads)`` with matching keys.  It has
    to be deterministic (freeze dropout masks and random labels).  ``loss()``,
    if given, is used for the finite-difference side instead; passing one that
    runs in ``np.longdouble`` removes float64 round-off from the oracle.

    Each entry is perturbed in place by +/- ``h`` and restored; the difference
    quotient divides by the step actually realised in float64.  The error for
    an entry is ``|a - n| / max(|a|, |n|, 1e-8)``.  With ``max_per_param`` only
    a random subset of each array's entries is checked.
    """
    if loss is None:
        def loss():
            return loss_and_grads()[0]
    _, grads = loss_and_grads()
    grads = {k: np.array(g, dtype=np.float64, copy=True) for k, g in grads.items()}
    worst = (None, None)
    max_err = 0.0
    n = 0
    for name, p in params.items():
        flat = p.reshape(-1)
        if not np.shares_memory(flat, p):
            raise ValueError(f"parameter {name} is not contiguous")
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = np.sort((rng or Rng(0)).choice(flat.size, max_per_param))
        analytic = grads[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = flat[i]
            lp = loss()
            flat[i] = orig - h
            down = flat[i]
            lm = loss()
            flat[i] = orig
            num = float((lp - lm) / (np.longdouble(up) - np.longdouble(down)))
            a = float(analytic[i])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            n += 1
            if err > max_err:
                max_err = err
                worst = (name, int(i))
    return GradCheckResult(float(max_err), worst, n, tolerance)


CHECKPOINT_FORMAT = "cfmask-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, architecture: dict, params: dict):
    """Write parameters and the architecture descriptor as one JSON document.

    Layout::

        {"format": "cfmask-checkpoint", "version": 1,
         "architecture": {...},
         "parameters": {"<name>": {"shape": [...], "data": [row-major floats]}}}

    Floats are written with Python's shortest round-trip repr, so a load
    restores every parameter bit-exactly.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": architecture,
        "parameters": {
            name: {"shape": list(p.shape), "data": [float(x) for x in p.reshape(-1)]}
            for name, p in params.items()
        },
    }
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True)


def load_checkpoint(path):
    """Return ``(architecture, params)`` from a checkpoint written by :func:`save_checkpoint`."""
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    params = {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["parameters"].items()
    }
    return doc["architecture"], params
