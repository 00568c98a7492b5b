"""Finite-difference gradient-check suite for every hand-written backward pass.

The finite-difference side evaluates losses in ``np.longdouble`` so that
round-off does not swamp entries with tiny gradients.  Instances are built so
that no LeakyReLU pre-activation sits within the step size of its kink:
inputs are scaled up to compensate for the ~1/D size of mask entries.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .masks import AttentionMaskNet, MaskPair, softmax_backward
from .model import CfmModel
from .nn import Dense, Dropout, LeakyReLU, Softmax, Tanh, cross_entropy, grad_check, one_hot
from .tensor import Rng

H = 1e-5
TOLERANCE = 1e-5

XL = np.longdouble


@dataclass
class CheckInstance:
    model: CfmModel
    x: np.ndarray
    y: np.ndarray
    comp_labels: np.ndarray
    dropout_mask: np.ndarray | None
    gamma: float
    lam: float = 0.0


def cfm_instance(n_features=20, n_classes=3, batch=4, seed=0, train_mode=True, mask="attention",
                 gamma=0.7, lam=0.0, input_scale=5.0) -> CheckInstance:
    """Randomised full model with frozen dropout mask and frozen random labels."""
    model = CfmModel(n_features, n_classes, mask=mask, seed=seed)
    r = Rng(seed).derive("gradcheck")
    for name, p in model.params().items():
        if name.endswith(".b") or name == "mask.dense2.W":
            p[...] = r.normal(scale=0.1, size=p.shape)
    x = r.normal(scale=input_scale, size=(batch, n_features))
    y = r.integers(1, n_classes, size=batch)
    comp_labels = r.integers(1, n_classes, size=batch)
    dm = None
    if train_mode:
        model.train()
        dm = model.sample_dropout_mask(batch, r)
    else:
        model.eval()
    return CheckInstance(model, x, y, comp_labels, dm, gamma, lam)


def check_model(inst: CheckInstance, h=H, tolerance=TOLERANCE, **kw):
    m = inst.model
    xl = inst.x.astype(XL)

    def lg():
        parts, grads = m.loss_and_grads(inst.x, inst.y, gamma=inst.gamma, lam=inst.lam,
                                        comp_labels=inst.comp_labels, dropout_mask=inst.dropout_mask)
        return parts.total, grads

    def loss():
        return m.loss(xl, inst.y, gamma=inst.gamma, lam=inst.lam, comp_labels=inst.comp_labels,
                      dropout_mask=inst.dropout_mask).total

    return grad_check(lg, m.params(), h=h, tolerance=tolerance, loss=loss, **kw)


def _layer_check(forward_backward, params, x, h, tolerance, seed):
    """Loss = <layer(x), r> for a fixed random direction r."""
    out, _ = forward_backward(x)
    r = Rng(seed).derive("direction").normal(size=out.shape)

    def lg():
        out, back = forward_backward(x)
        dx, grads = back(r)
        grads = dict(grads)
        grads["input"] = dx
        return float(np.sum(out * r)), grads

    def loss():
        return np.sum(forward_backward(x.astype(XL))[0] * r)

    full = dict(params)
    full["input"] = x

    return grad_check(lg, full, h=h, tolerance=tolerance, loss=loss)


def check_dense(seed=0, h=H, tolerance=TOLERANCE):
    r = Rng(seed)
    layer = Dense(6, 4, r.derive("w"))
    layer.b[...] = r.normal(size=4)
    x = r.normal(size=(5, 6))

    def fb(inp):
        y, c = layer.forward(inp)
        return y, lambda dy: layer.backward(dy, c)

    return _layer_check(fb, layer.params(), x, h, tolerance, seed)


def check_activation(kind, seed=0, h=H, tolerance=TOLERANCE):
    act = {"tanh": Tanh(), "leaky_relu": LeakyReLU(0.02), "softmax": Softmax()}[kind]
    x = Rng(seed).normal(size=(5, 7))
    # keep LeakyReLU inputs away from the kink
    x = np.where(np.abs(x) < 0.05, 0.5, x)

    def fb(inp):
        y, c = act.forward(inp)
        return y, lambda dy: (act.backward(dy, c), {})

    return _layer_check(fb, {}, x, h, tolerance, seed)


def check_dropout_frozen(seed=0, h=H, tolerance=TOLERANCE):
    r = Rng(seed)
    drop = Dropout(0.3)
    drop.training = True
    x = r.normal(size=(5, 8))
    mask = drop.sample_mask(x.shape, r.derive("mask"))

    def fb(inp):
        y, c = drop.forward(inp, mask=mask)
        return y, lambda dy: (drop.backward(dy, c), {})

    return _layer_check(fb, {}, x, h, tolerance, seed)


def check_softmax_cross_entropy(seed=0, h=H, tolerance=TOLERANCE):
    r = Rng(seed)
    logits = r.normal(size=(6, 4))
    target = one_hot(r.integers(1, 4, size=6), 4)
    sm = Softmax()

    def lg():
        p, c = sm.forward(logits)
        loss, dp = cross_entropy(p, target)
        return loss, {"logits": sm.backward(dp, c)}

    def loss():
        return cross_entropy(sm.forward(logits.astype(XL))[0], target)[0]

    return grad_check(lg, {"logits": logits}, h=h, tolerance=tolerance, loss=loss)


def check_mask_net(seed=0, h=H, tolerance=TOLERANCE):
    """Loss = <m, r1> + <m_comp, r2>: exercises both softmax branches."""
    r = Rng(seed)
    net = AttentionMaskNet(8, 6, r.derive("net"))
    net.dense2.W[...] = r.normal(scale=0.5, size=net.dense2.W.shape)
    net.dense2.b[...] = r.normal(scale=0.5, size=8)
    x = r.normal(size=(5, 8))
    r1, r2 = r.normal(size=8), r.normal(size=8)

    def lg():
        zbar, cache = net.forward(x)
        pair = MaskPair.from_logits(zbar)
        dz = softmax_backward(pair.m, r1) - softmax_backward(pair.m_comp, r2)
        return float(pair.m @ r1 + pair.m_comp @ r2), net.backward(dz, cache)

    def loss():
        zbar, _ = net.forward(x.astype(XL))
        pair = MaskPair.from_logits(zbar)
        return pair.m @ r1 + pair.m_comp @ r2

    return grad_check(lg, net.params(), h=h, tolerance=tolerance, loss=loss)


def check_linear_quadratic(seed=0, h=H, tolerance=1e-9):
    """Linear network with quadratic loss: the difference quotient is exact up to round-off."""
    r = Rng(seed)
    layer = Dense(5, 3, r.derive("w"))
    x = r.normal(size=(4, 5))
    t = r.normal(size=(4, 3))

    def lg():
        y, c = layer.forward(x)
        d = y - t
        _, grads = layer.backward(d, c)
        return 0.5 * float(np.sum(d * d)), grads

    def loss():
        y, _ = layer.forward(x.astype(XL))
        d = y - t
        return 0.5 * np.sum(d * d)

    return grad_check(lg, layer.params(), h=h, tolerance=tolerance, loss=loss)


def run_suite(seed=0, h=H, tolerance=TOLERANCE, n_features=20, n_classes=3, batch=4):
    """Run every check; returns a list of (name, GradCheckResult, seconds)."""
    checks = [
        ("dense (linear, quadratic loss)", lambda: check_linear_quadratic(seed, h)),
        ("dense", lambda: check_dense(seed, h, tolerance)),
        ("tanh", lambda: check_activation("tanh", seed, h, tolerance)),
        ("leaky_relu", lambda: check_activation("leaky_relu", seed, h, tolerance)),
        ("softmax", lambda: check_activation("softmax", seed, h, tolerance)),
        ("dropout (frozen mask)", lambda: check_dropout_frozen(seed, h, tolerance)),
        ("softmax + cross entropy", lambda: check_softmax_cross_entropy(seed, h, tolerance)),
        ("attention mask net (m and m_comp)", lambda: check_mask_net(seed, h, tolerance)),
        ("cfm model, eval mode", lambda: check_model(
            cfm_instance(n_features, n_classes, batch, seed, train_mode=False), h, tolerance)),
        ("cfm model, train mode, frozen dropout", lambda: check_model(
            cfm_instance(n_features, n_classes, batch, seed, train_mode=True), h, tolerance)),
        ("dfs-cfm model (vector mask, l1)", lambda: check_model(
            cfm_instance(n_features, n_classes, batch, seed, mask="vector", lam=0.01), h, tolerance)),
    ]
    out = []
    for name, fn in checks:
        t0 = time.perf_counter()
        res = fn()
        out.append((name, res, time.perf_counter() - t0))
    return out
