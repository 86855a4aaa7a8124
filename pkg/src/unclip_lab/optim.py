"""AdamW with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .tensor import DTYPE


class OptimError(Exception):
    pass


class AdamWState:
    """Per-parameter moment buffers plus hyperparameters.

    Weight decay is applied directly to the parameters, never through the
    moment estimates.
    """

    def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999,
                 epsilon=1e-8, weight_decay=0.0):
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.first_moment = [np.zeros_like(p.data) for p in params]
        self.second_moment = [np.zeros_like(p.data) for p in params]
        self._shapes = [p.data.shape for p in params]
        self._names = None

    def set_names(self, names):
        self._names = list(names)

    def _name(self, i):
        return self._names[i] if self._names else f"param[{i}]"


def adamw_step(params, grads, state):
    """One AdamW update in place; returns (params, state)."""
    if len(params) != len(state.first_moment):
        raise OptimError("parameter count does not match optimizer state")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise OptimError(f"missing gradient for {state._name(i)}")
        g = np.asarray(g, dtype=DTYPE)
        if g.shape != p.data.shape:
            raise OptimError(
                f"shape mismatch for {state._name(i)}: param {p.data.shape} grad {g.shape}")
        if not np.isfinite(g).all():
            raise OptimError(f"non-finite gradient for {state._name(i)}")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    lr = state.learning_rate
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=DTYPE)
        m = state.first_moment[i]
        v = state.second_moment[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (lr * (m_hat / (np.sqrt(v_hat) + state.epsilon))).astype(DTYPE)
        if state.weight_decay:
            p.data -= (lr * state.weight_decay * p.data).astype(DTYPE)
    return params, state
