"""Adam with bias correction over named parameters."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError


class Adam:
    """Adam over a dict of ``Parameter`` objects.

    Frozen parameters are skipped entirely: neither their values nor their
    moment estimates change.
    """

    def __init__(self, lr=0.0002, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr < 0:
            raise ConfigError("learning rate must be >= 0")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def hyperparameters(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}

    @classmethod
    def from_state(cls, hyper, m, v):
        opt = cls(hyper["lr"], hyper["beta1"], hyper["beta2"], hyper["eps"])
        opt.t = int(hyper["t"])
        opt.m = {k: a.copy() for k, a in m.items()}
        opt.v = {k: a.copy() for k, a in v.items()}
        return opt

    def init_moments(self, params):
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p.value)
                self.v[name] = np.zeros_like(p.value)

    def step(self, params):
        self.init_moments(params)
        for name, p in params.items():
            if not p.frozen and (p.grad is None or p.grad.shape != p.value.shape):
                raise ConfigError(f"missing gradient for unfrozen parameter {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            if p.frozen:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, state: Adam):
    state.step(params)
    return params, state
