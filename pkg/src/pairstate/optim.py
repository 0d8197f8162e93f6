"""Adam with decoupled weight decay, float64, dict-of-arrays parameters.

Weight decay multiplies parameters directly by (1 - lr * wd) before the
Adam step, so it never enters the moment estimates. The per-pair slope
exponents get their own group with zero decay (they have an explicit L1
penalty in the objective) and optionally their own learning rate.
"""

from __future__ import annotations

import numpy as np


class AdamW:
    def __init__(self, params: dict, lr: float, weight_decay: float = 1e-2,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8,
                 no_decay: set | None = None, lr_overrides: dict | None = None):
        """params: dict name -> float64 array, updated in place by step().

        no_decay: parameter names exempt from weight decay.
        lr_overrides: name -> learning rate replacing the default for it.
        """
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not (0 <= betas[0] < 1 and 0 <= betas[1] < 1):
            raise ValueError(f"betas must lie in [0, 1), got {betas}")
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.no_decay = set(no_decay or ())
        self.lr_overrides = dict(lr_overrides or {})
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict) -> None:
        """One update from gradients; missing names are skipped."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            lr = self.lr_overrides.get(name, self.lr)
            if self.weight_decay and name not in self.no_decay:
                p *= 1.0 - lr * self.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
