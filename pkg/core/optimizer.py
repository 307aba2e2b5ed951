"""
Adam optimizer
Parameters are immutable tensors, so every step returns replacements
instead of updating in place
"""

import logging
from dataclasses import dataclass, replace

import numpy as np

from core.autodiff import Tensor
from core.errors import ContractViolation

logger = logging.getLogger(__name__)

DEFAULT_LEARNING_RATE = 0.001


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = DEFAULT_LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, shape, lr=DEFAULT_LEARNING_RATE, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(np.zeros(shape), np.zeros(shape), 0, lr, beta1, beta2, eps)


def adam_step(param, grad, state):
    """One bias-corrected Adam update; returns (new_param, new_state)"""
    g = grad.data if isinstance(grad, Tensor) else np.asarray(grad, dtype=np.float64)
    if not (param.shape == g.shape == state.m.shape == state.v.shape):
        raise ContractViolation(
            f"adam_step shape mismatch: param {param.shape}, grad {g.shape}, state {state.m.shape}"
        )
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    updated = param.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_param = Tensor._wrap(updated, requires_grad=param.requires_grad, name=param.name)
    return new_param, replace(state, m=m, v=v, t=t)


class Adam:
    """Keeps one AdamState per named parameter"""

    def __init__(self, lr=DEFAULT_LEARNING_RATE, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.states = {}

    def step(self, params, grads):
        """Return a dict with every parameter in ``grads`` replaced by its updated value"""
        updated = {}
        for name, g in grads.items():
            param = params[name]
            state = self.states.get(name)
            if state is None:
                state = AdamState.fresh(param.shape, self.lr, self.beta1, self.beta2, self.eps)
            updated[name], self.states[name] = adam_step(param, g, state)
        return updated
