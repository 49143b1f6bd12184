"""Adam with bias correction plus the halve-on-plateau learning-rate rule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericError, ValidationError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    # plateau tracker
    best_val: float = float("inf")
    stagnant_epochs: int = 0
    plateau_factor: float = 0.5
    plateau_patience: int = 3

    def __post_init__(self):
        if not self.lr > 0:
            raise ValidationError(f"learning rate must be positive, got {self.lr}")


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """Apply one Adam update in place.  Parameters without a gradient are left alone."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise NumericError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def observe_validation(state: AdamState, val_loss: float) -> bool:
    """Record an epoch's validation loss; halve the LR after `patience` stagnant epochs.

    Returns True when the learning rate was reduced.
    """
    if val_loss < state.best_val:
        state.best_val = val_loss
        state.stagnant_epochs = 0
        return False
    state.stagnant_epochs += 1
    if state.stagnant_epochs >= state.plateau_patience:
        state.lr *= state.plateau_factor
        state.stagnant_epochs = 0
        return True
    return False


class Adam:
    """Optimizer object over a named parameter store."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, **kw):
        self.params = params
        self.state = AdamState(lr=lr, **kw)

    @property
    def lr(self) -> float:
        return self.state.lr

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        adam_step(self.params, {k: p.grad for k, p in self.params.items()}, self.state)

    def observe_validation(self, val_loss: float) -> bool:
        return observe_validation(self.state, val_loss)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            if name in self.state.m:
                out[f"{name}.adam.m"] = self.state.m[name]
                out[f"{name}.adam.v"] = self.state.v[name]
        s = self.state
        out["optimizer.scalars"] = np.array(
            [s.step, s.lr, s.beta1, s.beta2, s.eps, s.best_val, s.stagnant_epochs]
        )
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]):
        for name in self.params:
            if f"{name}.adam.m" in tensors:
                self.state.m[name] = tensors[f"{name}.adam.m"].copy()
                self.state.v[name] = tensors[f"{name}.adam.v"].copy()
        if "optimizer.scalars" in tensors:
            step, lr, b1, b2, eps, best, stag = tensors["optimizer.scalars"]
            s = self.state
            s.step, s.lr, s.beta1, s.beta2, s.eps = int(step), lr, b1, b2, eps
            s.best_val, s.stagnant_epochs = best, int(stag)
