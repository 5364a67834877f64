from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from diffcd.errors import ContractError
from diffcd.numerics.tensor import Tensor


@dataclass
class AdamState:
    """Bias-corrected Adam moments for one parameter tensor."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)


def adam_step(state: AdamState, param: Tensor, grad: Tensor | np.ndarray) -> tuple[Tensor, AdamState]:
    g = grad.data if isinstance(grad, Tensor) else np.asarray(grad, dtype=np.float64)
    if g.shape != param.shape:
        raise ContractError(f"gradient shape {g.shape} != parameter shape {param.shape}")
    m = np.zeros(param.shape) if state.m is None else state.m
    v = np.zeros(param.shape) if state.v is None else state.v
    if m.shape != param.shape:
        raise ContractError("Adam moments do not match the parameter shape")
    t = state.step + 1
    m = state.beta1 * m + (1.0 - state.beta1) * g
    v = state.beta2 * v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = param.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(state.lr, state.beta1, state.beta2, state.eps, t, m, v)
    return Tensor(new, requires_grad=param.requires_grad), new_state


class Adam:
    """Adam over a named parameter dict; swaps in updated tensors each step."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 lr_scale: dict[str, float] | None = None):
        """``lr_scale`` maps a parameter-name prefix to a learning-rate multiplier."""
        self.params = params
        self.states = {}
        for name in params:
            scale = 1.0
            for prefix, factor in (lr_scale or {}).items():
                if name.startswith(prefix):
                    scale = factor
            self.states[name] = AdamState(lr * scale, beta1, beta2, eps)

    def step(self, grads: dict[Tensor, Tensor]) -> None:
        for name, p in list(self.params.items()):
            g = grads.get(p)
            if g is None:
                g = np.zeros(p.shape)
            self.params[name], self.states[name] = adam_step(self.states[name], p, g)
