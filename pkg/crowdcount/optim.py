"""Adam with decoupled weight decay."""

from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .errors import ContractError
from .tensor import Parameter


@dataclass
class AdamState:
    lr: float = 1e-5
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    def __init__(self, params: List[Parameter], state: AdamState = None):
        """Adam optimizer over named parameters.

        Args:
            params: Parameters with unique names
            state: Hyperparameters and moment buffers (default: fresh AdamState)
        """

        names = [p.name for p in params]
        if len(set(names)) != len(names) or "" in names:
            raise ContractError("Adam needs parameters with unique, non-empty names")
        self.params = params
        self.state = state or AdamState()
        for p in params:
            self.state.m.setdefault(p.name, np.zeros_like(p.data))
            self.state.v.setdefault(p.name, np.zeros_like(p.data))

    def step(self):
        """Applies one update from the populated grads, then zeroes them."""

        missing = [p.name for p in self.params if p.grad is None]
        if missing:
            raise ContractError(f"no gradient for parameter {missing[0]}")

        s = self.state
        s.step += 1
        correction1 = 1.0 - s.beta1 ** s.step
        correction2 = 1.0 - s.beta2 ** s.step
        for p in self.params:
            m, v = s.m[p.name], s.v[p.name]
            m *= s.beta1
            m += (1.0 - s.beta1) * p.grad
            v *= s.beta2
            v += (1.0 - s.beta2) * p.grad * p.grad
            if s.weight_decay:
                p.data -= s.lr * s.weight_decay * p.data
            p.data -= s.lr * (m / correction1) / (np.sqrt(v / correction2) + s.eps)
        self.zero_grad()

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def adam_step(params: List[Parameter], state: AdamState):
    Adam(params, state).step()
