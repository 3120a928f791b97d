"""Adam with bias correction.  The functional ``adam_step`` takes the
gradients explicitly and never mutates anything when it rejects a step;
the ``Adam`` wrapper collects gradients off the tensors, substituting
zeros for parameters the current graph did not reach (their moments
decay but a zero-state parameter stays put exactly).
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractError, NumericError
from .tensor import Tensor


class AdamState:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ConfigError(f"betas must be in [0, 1), got {beta1}, {beta2}")
        if eps <= 0.0:
            raise ConfigError(f"eps must be positive, got {eps}")
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}


def adam_step(state: AdamState, params: dict, grads: dict, lr: float):
    """One bias-corrected update in place.  All gradients are validated
    before any parameter moves, so a NaN aborts the step cleanly."""
    for name in params:
        if name not in grads:
            raise ContractError(f"no gradient supplied for '{name}'")
        g = grads[name]
        if g.shape != params[name].data.shape:
            raise ContractError(
                f"gradient for '{name}' has shape {g.shape}, "
                f"expected {params[name].data.shape}"
            )
        if np.isnan(g).any():
            raise NumericError(f"NaN gradient for '{name}'; step aborted")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / (1.0 - b1 ** t)
        v_hat = state.v[name] / (1.0 - b2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


class Adam:
    """Stateful convenience wrapper over ``adam_step``."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr < 0.0:
            raise ConfigError(f"learning rate must be nonnegative, got {lr}")
        if not params:
            raise ConfigError("optimizer needs at least one parameter")
        for name, p in params.items():
            if not isinstance(p, Tensor) or not p.requires_grad:
                raise ContractError(f"'{name}' is not a trainable tensor")
        self.params = dict(params)
        self.lr = lr
        self.state = AdamState(self.params, beta1, beta2, eps)

    def step(self):
        grads = {
            name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in self.params.items()
        }
        adam_step(self.state, self.params, grads, self.lr)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
