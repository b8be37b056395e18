"""End-to-end finite-difference check of every parameter group."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import layers
from . import tensor as T
from .model import WsdConfig, WsdModel
from .optim import cross_entropy

ABLATIONS = {
    "default": {},
    "no_wsda": {"disable_wsda": True},
    "no_serg": {"disable_serg": True},
    "fixwin8": {"fixed_window_grid": 8},
    "fixwin32": {"fixed_window_grid": 32},
    "no_wsda_serg": {"disable_wsda": True, "disable_serg": True},
}


@dataclass
class GradReport:
    errors: dict = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())


def randomize(model: WsdModel, seed=None, scale: float = 0.3) -> WsdModel:
    """Jitter every parameter so no path is switched off by its init (zero conv, zero lin2)."""
    rng = np.random.default_rng(seed)
    for p in model.params.values():
        p.data = p.data + rng.uniform(-scale, scale, size=p.shape)
    return model


def random_bag(n: int, feature_dim: int, seed=None) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    return rng.normal(size=(1, n, feature_dim)), np.ones(n, dtype=bool)


def check_model(model: WsdModel, features: np.ndarray, mask: np.ndarray, label: int = 1,
                entries: int = 6, step: float = 1e-6, tolerance: float = 1e-4, seed=None,
                corrupt: Optional[Callable[[str, np.ndarray], np.ndarray]] = None) -> GradReport:
    """Compare backprop against central differences on sampled entries of each parameter.

    Each group also gets a directional check along a random unit vector, so
    entries that are not sampled still take part. ``corrupt`` may rewrite the
    analytic gradient before comparison (a negative control).
    """
    rng = np.random.default_rng(seed)
    # padding is fixed up front so every evaluation sees the same layout
    features, mask = layers._fit_length(np.asarray(features, dtype=np.float64), np.asarray(mask, bool),
                                        model.config.sequence_multiple())
    x = T.Tensor(features)

    def loss_value() -> float:
        return cross_entropy(layers.forward(x, mask, model), label).item()

    model.zero_grad()
    T.backward(cross_entropy(layers.forward(x, mask, model), label))
    report = GradReport(tolerance=tolerance)
    for name, p in model.named_parameters():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        if corrupt is not None:
            analytic = corrupt(name, analytic)
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(entries, flat.size), replace=False)
        num = np.empty(picks.size)
        for j, i in enumerate(picks):
            old = flat[i]
            flat[i] = old + step
            hi = loss_value()
            flat[i] = old - step
            lo = loss_value()
            flat[i] = old
            num[j] = (hi - lo) / (2 * step)
        got = analytic.reshape(-1)[picks]

        direction = rng.normal(size=p.shape)
        direction /= np.linalg.norm(direction)
        base = p.data.copy()
        p.data = base + step * direction
        hi = loss_value()
        p.data = base - step * direction
        lo = loss_value()
        p.data = base
        got = np.append(got, (analytic * direction).sum())
        num = np.append(num, (hi - lo) / (2 * step))

        denom = max(np.linalg.norm(got), np.linalg.norm(num), 1e-7)
        report.errors[name] = float(np.linalg.norm(got - num) / denom)
    model.zero_grad()
    return report


def gradcheck(config: WsdConfig, n_instances: int = 64, seed: int = 0, **kwargs) -> GradReport:
    """Gradient check of a randomized model of ``config`` on a random bag."""
    model = randomize(WsdModel(config, seed=seed), seed + 1)
    features, mask = random_bag(n_instances, config.feature_dim, seed + 2)
    return check_model(model, features, mask, seed=seed + 3, **kwargs)
