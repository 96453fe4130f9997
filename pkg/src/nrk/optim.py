"""First-order optimizers over a name -> Tensor mapping."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Optimizer:
    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def _grad(self, p: Tensor) -> np.ndarray:
        g = p.grad
        if self.weight_decay:
            g = g + self.weight_decay * p.data
        return g

    def state(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        pass


class SGD(Optimizer):
    def __init__(self, params, lr, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(params, lr, weight_decay)
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        lr = np.float32(self.lr)
        mom = np.float32(self.momentum)
        for k, p in self.params.items():
            v = self.velocity[k]
            v *= mom
            v += self._grad(p)
            p.data -= lr * v

    def state(self):
        return {f"optim.velocity.{k}": v for k, v in self.velocity.items()}

    def load_state(self, state):
        for k in self.velocity:
            self.velocity[k][...] = state[f"optim.velocity.{k}"]


class Adam(Optimizer):
    def __init__(self, params, lr, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        super().__init__(params, lr, weight_decay)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        # folded bias correction; a zero lr leaves parameters bit-identical
        step = np.float32(self.lr * np.sqrt(c2) / c1)
        eps = np.float32(self.eps * np.sqrt(c2))
        b1, b2 = np.float32(self.b1), np.float32(self.b2)
        for k, p in self.params.items():
            g = self._grad(p)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= step * m / (np.sqrt(v) + eps)

    def state(self):
        out = {"optim.step": np.array([self.t], np.float32)}
        out.update({f"optim.m.{k}": v for k, v in self.m.items()})
        out.update({f"optim.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, state):
        self.t = int(state["optim.step"][0])
        for k in self.m:
            self.m[k][...] = state[f"optim.m.{k}"]
            self.v[k][...] = state[f"optim.v.{k}"]


def make_optimizer(name: str, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0) -> Optimizer:
    if name == "adam":
        return Adam(params, lr, weight_decay=weight_decay)
    if name in ("sgd", "sgd_momentum"):
        return SGD(params, lr, momentum=momentum, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")
