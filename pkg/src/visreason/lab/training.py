"""Plain gradient descent on the toy objectives (no momentum, fixed rate).

Traces record the objective at every iterate including the initial one,
so descent properties are assertable on the trace directly.
"""

from __future__ import annotations

import math
from typing import Sequence

from ..errors import VisreasonError
from .losses import (
    sdpo_loss,
    sdpo_loss_gradient,
    sft_objective,
    sft_objective_gradient,
)
from .policy import PreferencePair, ToyPolicy, ToyTrajectory, TrainConfig


class DivergenceDetected(VisreasonError):
    pass


def train_sft(policy: ToyPolicy, dataset: Sequence[ToyTrajectory],
              cfg: TrainConfig) -> tuple[ToyPolicy, list[float]]:
    """Descend the weighted cross-entropy objective from the given policy."""
    current = policy.copy()
    trace = [sft_objective(current, dataset)]
    for _ in range(cfg.iterations):
        grad = sft_objective_gradient(current, dataset)
        for context, row in grad.items():
            current.logits[context] -= cfg.learning_rate * row
        loss = sft_objective(current, dataset)
        if not math.isfinite(loss):
            raise DivergenceDetected(f"objective became {loss} during SFT training")
        trace.append(loss)
    return current, trace


def train_sdpo(phi0: ToyPolicy, pairs: Sequence[PreferencePair],
               cfg: TrainConfig) -> tuple[ToyPolicy, list[float]]:
    """Descend the multi-step preference loss starting from the reference policy."""
    if not pairs:
        raise ValueError("need at least one preference pair")
    phi = phi0.copy()
    trace = [sdpo_loss(phi, phi0, pairs, cfg.eta)]
    for _ in range(cfg.iterations):
        grad = sdpo_loss_gradient(phi, phi0, pairs, cfg.eta)
        for context, row in grad.items():
            phi.logits[context] -= cfg.learning_rate * row
        loss = sdpo_loss(phi, phi0, pairs, cfg.eta)
        if not math.isfinite(loss):
            raise DivergenceDetected(f"loss became {loss} during preference training")
        trace.append(loss)
    return phi, trace
