"""Optimizers. Plain SGD is the default; momentum and Adam are opt-in."""

from __future__ import annotations

import numpy as np

from . import numkernel as nk
from .numkernel import Tensor


class SGD:
    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.0):
        if not lr > 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros(p.shape) for p in params] if momentum else None

    def step(self) -> None:
        if not self.momentum:
            nk.sgd_step(self.params, self.lr)
            return
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                raise ValueError(f"parameter {p.name or p.shape} has no gradient")
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v
            p.grad = None

    def state_dict(self) -> dict:
        return {f"v{i}": v for i, v in enumerate(self.velocity or [])}

    def load_state_dict(self, state: dict) -> None:
        if self.velocity is not None:
            self.velocity = [np.array(state[f"v{i}"]) for i in range(len(self.params))]


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                raise ValueError(f"parameter {p.name or p.shape} has no gradient")
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None

    def state_dict(self) -> dict:
        state = {"t": np.array(self.t)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            state[f"m{i}"] = m
            state[f"v{i}"] = v
        return state

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = [np.array(state[f"m{i}"]) for i in range(len(self.params))]
        self.v = [np.array(state[f"v{i}"]) for i in range(len(self.params))]


def make_optimizer(name: str, params: list[Tensor], lr: float, momentum: float = 0.9):
    if name == "sgd":
        return SGD(params, lr)
    if name == "momentum":
        return SGD(params, lr, momentum=momentum)
    if name == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")
