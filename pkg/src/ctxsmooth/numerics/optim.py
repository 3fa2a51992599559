"""Adam / AdamW with per-parameter state.

Weight decay is decoupled (AdamW): it scales the parameter directly instead
of entering the moment estimates. ``weight_decay=0`` gives plain Adam.
"""

from __future__ import annotations

import numpy as np

from .tensor import Parameter

__all__ = ["AdamState", "Adam", "adam_step"]


class AdamState:
    """First/second moment estimates and step counter for one parameter."""

    __slots__ = ("m", "v", "step")

    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.step = 0


def adam_step(state: AdamState, param: Parameter, lr: float,
              beta1: float, beta2: float, eps: float,
              weight_decay: float) -> None:
    """One update on ``param`` from its accumulated gradient.

    Clears the gradient afterwards. Raises if the gradient or the updated
    parameter is non-finite, so divergence surfaces at the step that caused
    it rather than corrupting later arithmetic.
    """
    g = param.grad
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient in adam_step")
    state.step += 1
    t = state.step
    state.m = beta1 * state.m + (1.0 - beta1) * g
    state.v = beta2 * state.v + (1.0 - beta2) * (g * g)
    m_hat = state.m / (1.0 - beta1 ** t)
    v_hat = state.v / (1.0 - beta2 ** t)
    if weight_decay:
        param.data *= 1.0 - lr * weight_decay
    param.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    if not np.all(np.isfinite(param.data)):
        raise FloatingPointError("non-finite parameter after adam_step")
    param.grad = np.zeros_like(param.data)


class Adam:
    def __init__(self, params, lr: float = 3e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.states = [AdamState(p.data.shape) for p in self.params]

    def step(self) -> None:
        for state, param in zip(self.states, self.params):
            adam_step(state, param, self.lr, self.beta1, self.beta2,
                      self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)
