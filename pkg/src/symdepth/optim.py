"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class AdamW:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8
    step_count: int = 0
    _m: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    _v: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def step(self, params: Mapping[str, Tensor]) -> None:
        """Update ``params`` in place from their ``.grad``; entries without a gradient are skipped.

        Decay applies to matrices and kernels only; biases, norm affines and
        1-D tables are left undecayed.
        """
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and p.data.ndim >= 2:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def zero_grad(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
