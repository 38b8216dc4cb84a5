"""Adaptive-moment gradient descent over named parameter segments."""

from __future__ import annotations

import numpy as np

from .params import ParamVector


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, params: ParamVector, grads: ParamVector) -> ParamVector:
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for name in params.names:
            g = grads[name]
            m = self._m.get(name)
            v = self._v.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self._m[name] = m
            self._v[name] = v
            mhat = m / (1 - b1 ** self._t)
            vhat = v / (1 - b2 ** self._t)
            out[name] = params[name] - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return ParamVector(out, validate=False)
