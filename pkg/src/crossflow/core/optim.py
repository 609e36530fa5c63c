"""Adam with bias correction, applied in place to leaf tensors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from crossflow.core.tensor import Tensor
from crossflow.errors import ContractError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Tensor, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), 0, beta1, beta2, eps)


def adam_update(param: Tensor, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam step on ``param.data``; clears ``param.grad``."""
    if param.grad is None:
        raise ContractError(f"adam_update on a parameter without grad ({param.name or param.shape})")
    g = param.grad
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    step = (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.data.dtype)
    param.data -= step
    param.grad = None


@dataclass
class Adam:
    """Convenience wrapper holding one AdamState per parameter."""

    params: list[Tensor]
    lr: float
    states: list[AdamState] = field(default_factory=list)

    def __post_init__(self):
        self.params = list(self.params)
        if not self.states:
            self.states = [AdamState.for_param(p) for p in self.params]

    def step(self) -> None:
        for p, s in zip(self.params, self.states):
            if p.grad is None:
                # parameter took no part in this loss; keep moments untouched
                continue
            adam_update(p, s, self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def parameters_require_grad(params: Iterable[Tensor], flag: bool) -> None:
    for p in params:
        p.requires_grad = flag
        p.grad = None
