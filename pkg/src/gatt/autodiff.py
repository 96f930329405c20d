"""Backward pass driver, gradient checking, optimizers and stochastic ops.

The tape (see gatt.tensor) stores op records in execution order, which is a
topological order of the graph; ``backward`` walks it once in strict reverse.
All randomness goes through numpy's Philox engine, a counter-based generator
with a stable cross-platform stream for a given seed.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def new_rng(seed):
    """Seeded counter-based generator (Philox 4x64)."""
    return np.random.Generator(np.random.Philox(seed))


class Parameter(Tensor):
    __slots__ = ("name", "weight_decay")

    def __init__(self, data, dtype=None, name="", weight_decay=True):
        super().__init__(data, dtype=dtype, requires_grad=True)
        self.name = name
        self.weight_decay = bool(weight_decay)


def he_init(rng, shape, fan_in, dtype="f32", name="", weight_decay=True):
    """Fan-in scaled normal init, std = sqrt(2 / fan_in)."""
    data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return Parameter(data, dtype=dtype, name=name, weight_decay=weight_decay)


def backward(tape, loss):
    """Seed d(loss)/d(loss) = 1 and replay the tape records in reverse.

    Each record is visited exactly once; records whose output never received
    a gradient are skipped (they do not influence the loss).
    """
    if loss.size != 1:
        raise ValueError("backward expects a scalar loss")
    loss.grad = np.ones_like(loss.data)
    for fn, out in reversed(tape.records):
        if out.grad is None:
            continue
        fn()


def zero_grads(params):
    for p in params:
        p.grad = None


def finite_diff_grad(loss_fn, params, h=1e-5):
    """Central-difference gradient of a scalar-valued closure.

    `loss_fn` takes no arguments and must not depend on an active tape; it is
    re-evaluated with each parameter coordinate nudged by +/-h.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data, dtype=np.float64)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = float(loss_fn())
            flat[i] = orig - h
            lm = float(loss_fn())
            flat[i] = orig
            gflat[i] = (lp - lm) / (2.0 * h)
        grads.append(g)
    return grads


def grad_rel_err(a, b):
    """max_i |a_i - b_i| / max(1, |a_i|, |b_i|)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


class SGD:
    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self):
        self.step_count += 1
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and p.weight_decay:
                g = g + p.data.dtype.type(self.weight_decay) * p.data
            if self.momentum:
                v *= p.data.dtype.type(self.momentum)
                v += g
                g = v
            p.data -= p.data.dtype.type(self.lr) * g


class Adam:
    """Adam with decoupled-from-nothing L2: decay is added to the raw gradient."""

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self):
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            dt = p.data.dtype.type
            g = p.grad
            if self.weight_decay and p.weight_decay:
                g = g + dt(self.weight_decay) * p.data
            m *= dt(b1)
            m += dt(1 - b1) * g
            v *= dt(b2)
            v += dt(1 - b2) * (g * g)
            mhat = m / dt(1 - b1 ** t)
            vhat = v / dt(1 - b2 ** t)
            p.data -= dt(self.lr) * mhat / (np.sqrt(vhat) + dt(self.eps))


def step_decay_lr(base_lr, epoch, decay_epochs, factor=0.1):
    """Step schedule: multiply by `factor` at each epoch listed in decay_epochs."""
    lr = base_lr
    for e in sorted(decay_epochs):
        if epoch >= e:
            lr *= factor
    return lr


def dropout(t, rate, rng, training=True):
    """Inverted dropout: keep with prob 1-rate and scale kept units by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return t
    keep = (rng.random(t.shape) >= rate)
    scale = t.data.dtype.type(1.0 / (1.0 - rate))
    mask = keep.astype(t.data.dtype) * scale
    out = Tensor(t.data * mask)

    def bwd():
        if t.requires_grad:
            T._ensure_grad(t)
            t.grad += out.grad * mask

    T._record(out, (t,), bwd)
    return out
