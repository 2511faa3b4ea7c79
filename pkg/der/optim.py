"""First-order optimisers over dictionaries of named tensors.

``step`` returns fresh arrays; the input dictionaries are never modified so
parameter snapshots handed out earlier stay valid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Protocol

import numpy as np

from der.diffcore import Tensor


class Optimizer(Protocol):
    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, Tensor]) -> dict[str, Tensor]: ...


@dataclass
class SGD:
    lr: float

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, Tensor]) -> dict[str, Tensor]:
        return {name: params[name] - self.lr * grads[name] for name in grads}


@dataclass
class Adam:
    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    _m: dict[str, Tensor] = field(default_factory=dict, repr=False)
    _v: dict[str, Tensor] = field(default_factory=dict, repr=False)
    _t: int = 0

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, Tensor]) -> dict[str, Tensor]:
        b1, b2 = self.betas
        self._t += 1
        out: dict[str, Tensor] = {}
        for name, g in grads.items():
            m = b1 * self._m.get(name, np.zeros_like(g)) + (1 - b1) * g
            v = b2 * self._v.get(name, np.zeros_like(g)) + (1 - b2) * g * g
            self._m[name], self._v[name] = m, v
            m_hat = m / (1 - b1**self._t)
            v_hat = v / (1 - b2**self._t)
            out[name] = params[name] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


def make_optimizer(kind: str, lr: float) -> Optimizer:
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {kind!r}")


def global_norm(grads: Mapping[str, Tensor]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_grad_norm(grads: Mapping[str, Tensor], max_norm: float) -> dict[str, Tensor]:
    """Rescale the group so its global norm is at most ``max_norm``; 0 disables."""
    if max_norm <= 0:
        return dict(grads)
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / (norm + 1e-12)
    return {name: g * scale for name, g in grads.items()}
