"""Adam."""

from __future__ import annotations

import numpy as np


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update over ``name -> ndarray`` dicts.

    ``state`` is ``{"t": int, "m": {...}, "v": {...}}`` (empty dict to
    start). Returns ``(new_params, new_state)``; inputs are not modified.
    """
    t = state.get("t", 0) + 1
    m_prev, v_prev = state.get("m", {}), state.get("v", {})
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = beta1 * m_prev.get(name, 0.0) + (1 - beta1) * g
        v = beta2 * v_prev.get(name, 0.0) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_new[name] = m
        v_new[name] = v
    return new_params, {"t": t, "m": m_new, "v": v_new}


class Adam:
    """Stateful wrapper updating ``Tensor.data`` in place from ``Tensor.grad``."""

    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.betas = (beta1, beta2)
        self.eps = eps
        self.state = {}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        data = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        new, self.state = adam_step(data, grads, self.state, self.lr, *self.betas, self.eps)
        for k, p in self.params.items():
            p.data = new[k]
