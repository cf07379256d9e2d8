"""Adam with per-group learning rates."""
from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, params: dict, lrs: dict, betas=(0.9, 0.99), eps=1e-15):
        self.params = params
        self.lrs = dict(lrs)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.v = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict, lr_scale: float = 1.0):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            step = self.lrs[k] * lr_scale * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p -= step.astype(p.dtype)


class RowAdam:
    """Adam over rows of a (N, k) parameter table where only some rows get a
    gradient each step; each row keeps its own step count.  With ``decay``
    the rate of a row falls exponentially to ``decay * lr`` over its first
    ``decay_steps`` updates."""

    def __init__(self, n: int, k: int, lr, betas=(0.9, 0.99), eps=1e-15, decay: float = 1.0,
                 decay_steps: int = 1):
        self.lr = np.broadcast_to(np.asarray(lr, dtype=np.float64), (k,)).copy()
        self.decay = float(decay)
        self.decay_steps = max(int(decay_steps), 1)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros((n, k))
        self.v = np.zeros((n, k))
        self.t = np.zeros(n, dtype=np.int64)

    def step(self, rows, grads) -> np.ndarray:
        """Returns the update (to be added) for ``rows``."""
        rows = np.asarray(rows, dtype=np.int64)
        g = np.asarray(grads, dtype=np.float64)
        self.t[rows] += 1
        t = self.t[rows][:, None]
        self.m[rows] = self.b1 * self.m[rows] + (1 - self.b1) * g
        self.v[rows] = self.b2 * self.v[rows] + (1 - self.b2) * g * g
        mh = self.m[rows] / (1 - self.b1**t)
        vh = self.v[rows] / (1 - self.b2**t)
        scale = self.decay ** np.minimum(t / self.decay_steps, 1.0)
        return -self.lr * scale * mh / (np.sqrt(vh) + self.eps)

    def reset(self, rows):
        self.m[rows] = 0.0
        self.v[rows] = 0.0
        self.t[rows] = 0
