"""Adam with optional cosine annealing and warm restarts."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class CosineRestarts:
    """Cosine annealing from ``base_lr`` to ``min_lr`` over ``period`` steps,
    restarting at each period boundary; periods grow by ``mult``."""

    period: int
    mult: float = 1.0
    min_lr: float = 0.0

    def factor(self, step):
        t, length = step, float(self.period)
        while t >= length:
            t -= length
            length *= self.mult
        return t, length

    def lr(self, base_lr, step):
        t, length = self.factor(step)
        return self.min_lr + 0.5 * (base_lr - self.min_lr) * (1.0 + math.cos(math.pi * t / length))


@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: CosineRestarts | None = None
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def current_lr(self):
        """Learning rate the next update will use."""
        if self.schedule is None:
            return self.lr
        return self.schedule.lr(self.lr, self.step)

    def arrays(self, prefix="adam"):
        out = {f"{prefix}.step": np.array(float(self.step))}
        for name in sorted(self.m):
            out[f"{prefix}.m.{name}"] = self.m[name]
            out[f"{prefix}.v.{name}"] = self.v[name]
        return out

    def load_arrays(self, arrays, prefix="adam"):
        self.step = int(arrays[f"{prefix}.step"])
        for key, value in arrays.items():
            if key.startswith(f"{prefix}.m."):
                self.m[key[len(prefix) + 3:]] = value.copy()
            elif key.startswith(f"{prefix}.v."):
                self.v[key[len(prefix) + 3:]] = value.copy()


def adam_update(state, params, grads):
    """One Adam step on a ``{name: array}`` dict; returns the new dict.

    Gradients missing from ``grads`` count as zero.
    """
    lr = state.current_lr()
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


def clip_global_norm(grads, max_norm):
    """Scale all gradients together so their joint L2 norm is <= max_norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm is None or total <= max_norm:
        return grads, total
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total
