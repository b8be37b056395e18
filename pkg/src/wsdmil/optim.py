"""Adam and the cross-entropy loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class TrainingError(RuntimeError):
    pass


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """``-log softmax(logits)[label]`` for a single ``(C,)`` logit vector."""
    num_classes = logits.shape[-1]
    if not 0 <= int(label) < num_classes:
        raise ValueError(f"label {label} outside [0, {num_classes})")
    return T.neg(T.log_softmax(logits)[int(label)])


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-5,
              betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update of the arrays in ``params``."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if m.shape != p.shape:
            raise TrainingError(f"moment buffer shape {m.shape} != parameter {name!r} shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    """Adam over the named tensors of a model."""

    def __init__(self, named_params, lr: float = 1e-5, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(named_params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = AdamState()

    def step(self) -> None:
        adam_step({k: p.data for k, p in self.params.items()},
                  {k: p.grad for k, p in self.params.items()},
                  self.state, self.lr, self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
