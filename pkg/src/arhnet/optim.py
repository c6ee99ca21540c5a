"""AdamW with decoupled weight decay over named parameter dicts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def buffers(self, prefix):
        out = {f"{prefix}.m.{k}": a for k, a in self.m.items()}
        out.update({f"{prefix}.v.{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_buffers(cls, buffers, prefix, step):
        m = {k[len(prefix) + 3:]: a for k, a in buffers.items() if k.startswith(f"{prefix}.m.")}
        v = {k[len(prefix) + 3:]: a for k, a in buffers.items() if k.startswith(f"{prefix}.v.")}
        return cls(m, v, step)


def adamw_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
    """
    One update of every parameter named in `grads`.

    m <- b1 m + (1 - b1) g ;  v <- b2 v + (1 - b2) g^2
    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)

    Parameter tensors get new data arrays; `state` is updated in place.
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        theta = params[name]
        if g.shape != theta.shape:
            raise ShapeError(f"adamw: gradient {g.shape} does not match parameter '{name}' {theta.shape}")
        dtype = theta.data.dtype
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(theta.data)
            v = np.zeros_like(theta.data)
        m = (b1 * m + (1 - b1) * g).astype(dtype)
        v = (b2 * v + (1 - b2) * g * g).astype(dtype)
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * theta.data
        theta.data = (theta.data - lr * update).astype(dtype)
    return params, state


def grad_norm(grads):
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


class AdamW:
    """Holds the hyperparameters and moment state for one parameter group."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2, state=None):
        self.params = params
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = state or OptimState()

    def zero_grad(self):
        for tensor in self.params.values():
            tensor.zero_grad()

    def collect_grads(self):
        """Current `.grad` of each parameter, zeros where nothing flowed."""
        return {
            name: t.grad if t.grad is not None else np.zeros_like(t.data)
            for name, t in self.params.items()
        }

    def step(self, grads=None):
        grads = self.collect_grads() if grads is None else grads
        adamw_step(self.params, grads, self.state, self.lr, self.betas, self.eps, self.weight_decay)
        return grad_norm(grads)
