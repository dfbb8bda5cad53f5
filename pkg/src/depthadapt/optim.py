"""Adam optimizer for the stage-1 adapter factors."""

from __future__ import annotations

import numpy as np

from .autodiff import GradientMap, Tensor


class Adam:
    """Bias-corrected Adam over an explicit parameter list.

    Parameters without a gradient entry in a step are skipped (their
    gradient is zero: the loss did not reach them).
    """

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: GradientMap) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            entry = grads.get(p)
            if entry is None:
                continue
            g = entry.data
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g * g
            m_hat = self._m[i] / c1
            v_hat = self._v[i] / c2
            p.update_(-self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
