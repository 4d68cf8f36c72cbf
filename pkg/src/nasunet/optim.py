"""Learning-rate schedule and the two optimizers used by search and retraining.

Both update rules add weight decay to the gradient (coupled decay).  The
functional forms work on plain arrays in place; the classes hold per-parameter
state keyed by position and skip parameters whose ``grad`` is ``None``.
"""
import math

import numpy as np


def cosine_lr(t, T, lr_max, lr_min):
    """Single cosine sweep from ``lr_max`` at t=0 to ``lr_min`` at t=T."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 <= t <= T:
        raise ValueError(f"t={t} outside [0, {T}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / T))


def _check_shapes(params, grads, *states):
    if len(params) != len(grads) or any(len(s) != len(params) for s in states):
        raise ValueError("params, grads and state lists differ in length")
    for i, p in enumerate(params):
        for other in (grads[i], *(s[i] for s in states)):
            if np.shape(other) != np.shape(p):
                raise ValueError(f"shape mismatch at index {i}: {np.shape(other)} vs {np.shape(p)}")


def sgd_momentum_step(params, grads, velocity, lr, momentum=0.95, weight_decay=0.0):
    """v <- mu*v + (g + wd*p);  p <- p - lr*v.  Arrays are updated in place."""
    _check_shapes(params, grads, velocity)
    for p, g, v in zip(params, grads, velocity):
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v
    return params


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """Bias-corrected Adam.  ``state`` is a dict with keys ``m``, ``v`` (lists) and ``t``."""
    _check_shapes(params, grads, state["m"], state["v"])
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if weight_decay:
            g = g + weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


class SGD:
    def __init__(self, params, lr, momentum=0.95, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        idx = [i for i, p in enumerate(self.params) if p.grad is not None]
        sgd_momentum_step(
            [self.params[i].data for i in idx],
            [self.params[i].grad for i in idx],
            [self.velocity[i] for i in idx],
            self.lr, self.momentum, self.weight_decay,
        )

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state(self):
        return {"velocity": self.velocity}

    def load_state(self, state):
        self.velocity = [np.array(v, dtype=p.data.dtype) for v, p in zip(state["velocity"], self.params)]


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        # Step count is per parameter so that params skipped on a step keep a
        # consistent bias correction.
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = np.zeros(len(self.params), dtype=np.int64)

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            st = {"m": [self.m[i]], "v": [self.v[i]], "t": int(self.t[i])}
            adam_step([p.data], [p.grad], st, self.lr, self.betas, self.eps, self.weight_decay)
            self.t[i] = st["t"]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state(self):
        return {"m": self.m, "v": self.v, "t": self.t}

    def load_state(self, state):
        self.m = [np.array(a, dtype=p.data.dtype) for a, p in zip(state["m"], self.params)]
        self.v = [np.array(a, dtype=p.data.dtype) for a, p in zip(state["v"], self.params)]
        self.t = np.array(state["t"], dtype=np.int64)
