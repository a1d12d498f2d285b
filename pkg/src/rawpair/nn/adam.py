"""Bias-corrected Adam over named parameter tensors."""

from __future__ import annotations

import numpy as np

from .tensor import AutodiffError, Tensor


class Adam:
    """Standard Adam with bias correction; deterministic given gradients.

    Parameters are a name → Tensor mapping; per-parameter first/second
    moments live in `self.m` / `self.v` with matching shapes, and the step
    count `t` increments by exactly one per `step()`.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {lr}")
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        """Apply one update from the current gradients.

        Raises if any parameter is missing its gradient (backward not run
        or grads already cleared).
        """
        lr = self.lr if lr is None else lr
        if lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {lr}")
        for name, p in self.params.items():
            if p.grad is None:
                raise AutodiffError(f"adam: parameter '{name}' has no gradient")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        """Snapshot for checkpointing; arrays are copied."""
        return {
            "t": self.t,
            "m": {k: a.copy() for k, a in self.m.items()},
            "v": {k: a.copy() for k, a in self.v.items()},
        }

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.params:
            self.m[k][...] = state["m"][k]
            self.v[k][...] = state["v"][k]
