from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import NumericError, Tensor


@dataclass
class OptimizerState:
    learning_rate: float = 1e-4
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    best_monitored_loss: float = math.inf
    bad_evaluations: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")

    def scalars(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "plateau_patience": self.plateau_patience,
            "plateau_factor": self.plateau_factor,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step_count": self.step_count,
            "best_monitored_loss": self.best_monitored_loss,
            "bad_evaluations": self.bad_evaluations,
        }


def adam_step(state: OptimizerState, params: dict[str, Tensor]) -> None:
    """One Adam update in place on every parameter in ``params``.

    Parameters without a gradient are treated as having a zero gradient.
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.first_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.first_moment[name] = m
            state.second_moment[name] = np.zeros_like(p.data)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)


def plateau_step(state: OptimizerState, monitored_loss: float) -> float:
    """Reduce-on-plateau: scale the learning rate after ``patience`` bad calls."""
    if not math.isfinite(monitored_loss):
        raise NumericError(f"monitored loss is not finite: {monitored_loss}")
    if monitored_loss < state.best_monitored_loss:
        state.best_monitored_loss = monitored_loss
        state.bad_evaluations = 0
    else:
        state.bad_evaluations += 1
        if state.bad_evaluations >= state.plateau_patience:
            state.learning_rate *= state.plateau_factor
            state.bad_evaluations = 0
    return state.learning_rate
