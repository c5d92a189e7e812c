"""Verifier reward: eta-scaled log-probability ratios between the tuned
and reference scoring models, summed over planning and action segments.

The termination test compares the UNSCALED per-step log ratio against
epsilon (strictly); the reward and its per-step delta carry the eta
factor. The base-state constant never matters: it cancels in deltas and
in preference differences for a shared initial state, so it is a fixed
configurable convention (default 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

from .errors import VisreasonError


class IncompleteScore(VisreasonError):
    pass


@dataclass(frozen=True)
class StepScore:
    """Sequence log-probs for one step under the tuned and reference models.

    Final-answer entries carry only the planning pair (final=True); every
    other entry must provide all four values.
    """

    planning_tuned: float
    planning_ref: float
    action_tuned: float | None = None
    action_ref: float | None = None
    final: bool = False


@dataclass(frozen=True)
class VerifierConfig:
    eta: float = 1.0
    epsilon: float = 0.5
    q_convention: float = 0.0

    def __post_init__(self) -> None:
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def step_log_ratio(score: StepScore) -> float:
    """(tuned - ref) planning log-prob gap plus the action gap (0 for final entries)."""
    planning = score.planning_tuned - score.planning_ref
    if score.final:
        if score.action_tuned is not None or score.action_ref is not None:
            raise IncompleteScore("final-answer scores must not carry an action pair")
        return planning
    if score.action_tuned is None or score.action_ref is None:
        raise IncompleteScore("non-final step is missing its action score pair")
    return planning + (score.action_tuned - score.action_ref)


def reward(scores: Iterable[StepScore], cfg: VerifierConfig) -> float:
    """Trajectory reward: eta * sum of step log ratios, plus the base convention.

    The score list must cover every planning (the final answer included,
    flagged final=True) and every action.
    """
    total = 0.0
    for score in scores:
        total += step_log_ratio(score)
    return cfg.eta * total + cfg.q_convention


def reward_delta(score: StepScore, cfg: VerifierConfig) -> float:
    """Reward difference contributed by one step; the base constant cancels."""
    return cfg.eta * step_log_ratio(score)


def should_stop(raw_ratio: float, cfg: VerifierConfig) -> bool:
    """Strict test |raw_ratio| < epsilon on the unscaled step log ratio."""
    return abs(raw_ratio) < cfg.epsilon


def preference_prob(r_w: float, r_l: float) -> float:
    """Probability the first trajectory is preferred: logistic of the reward gap."""
    return sigmoid(r_w - r_l)


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)
