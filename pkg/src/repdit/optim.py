"""Adam over a parameter dict.

Updates are out of place: each step swaps in fresh leaf tensors, so tensors handed
out earlier never change underneath their holders.
"""

from __future__ import annotations

import numpy as np

from .numerics import Tensor


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor]) -> dict[str, Tensor]:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        new = {}
        # parameters without a gradient (e.g. gates under a forced value) get zero moments
        for name in sorted(params):
            p = params[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.get(name, np.zeros_like(p.data))
            v = self.v.get(name, np.zeros_like(p.data))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.m[name], self.v[name] = m, v
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            new[name] = Tensor(p.data - update, requires_grad=True)
        return {name: new[name] for name in params}

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state(self, t: int, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(t)
        self.m = {k[len("adam.m."):]: v.copy() for k, v in arrays.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: v.copy() for k, v in arrays.items() if k.startswith("adam.v.")}
