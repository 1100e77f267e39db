"""Adam with decoupled weight decay over named numpy arrays."""

import numpy as np


class AdamW:
    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01, no_decay=()):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        """Return updated copies of ``params`` (dict name -> array)."""
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            decay = 0.0 if name in self.no_decay else self.weight_decay
            p = p * (1 - self.lr * decay)
            out[name] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out
