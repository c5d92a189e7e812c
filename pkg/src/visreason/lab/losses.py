"""Training objectives with analytic gradients and a finite-difference oracle.

The cross-entropy loss sums negative log-likelihoods over planning and
action segments; the dataset objective averages per-trajectory losses
weighted by 1/(depth+1). The multi-step preference loss is
-log sigmoid(eta * (winner log-ratio sums - loser log-ratio sums)),
summed over pairs. Gradients are exact softmax gradients; the central
finite-difference table exists purely to check them.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import VisreasonError
from .policy import PreferencePair, ToyPolicy, ToyTrajectory

GradientTable = dict[str, np.ndarray]


class EmptyDataset(VisreasonError):
    pass


def _segments(traj: ToyTrajectory) -> Iterable[tuple[str, str]]:
    yield from traj.plannings
    yield from traj.actions


def sft_loss(policy: ToyPolicy, traj: ToyTrajectory) -> float:
    total = 0.0
    for context, symbol in _segments(traj):
        total -= policy.log_prob(context, symbol)
    return total


def sft_objective(policy: ToyPolicy, dataset: Sequence[ToyTrajectory]) -> float:
    if not dataset:
        raise EmptyDataset("the SFT dataset is empty")
    return sum(sft_loss(policy, t) / (t.depth + 1) for t in dataset) / len(dataset)


def sft_objective_gradient(policy: ToyPolicy, dataset: Sequence[ToyTrajectory]) -> GradientTable:
    if not dataset:
        raise EmptyDataset("the SFT dataset is empty")
    grad = policy.zeros_like()
    for traj in dataset:
        weight = 1.0 / (len(dataset) * (traj.depth + 1))
        for context, symbol in _segments(traj):
            row = grad.get(context)
            if row is None:
                policy.row(context)  # raises UnknownContext
            p = policy.probs(context)
            p = p.copy()
            p[policy.symbol_index(symbol)] -= 1.0
            grad[context] += weight * p
    return grad


def trajectory_log_ratio(phi: ToyPolicy, phi0: ToyPolicy, traj: ToyTrajectory) -> float:
    """Sum over all segments of log phi(target|ctx) - log phi0(target|ctx)."""
    total = 0.0
    for context, symbol in _segments(traj):
        total += phi.log_prob(context, symbol) - phi0.log_prob(context, symbol)
    return total


def toy_reward(phi: ToyPolicy, phi0: ToyPolicy, traj: ToyTrajectory, eta: float, q: float = 0.0) -> float:
    """Trajectory reward on toy policies: eta * summed log ratios + base constant."""
    return eta * trajectory_log_ratio(phi, phi0, traj) + q


def pair_margin(phi: ToyPolicy, phi0: ToyPolicy, pair: PreferencePair) -> float:
    return trajectory_log_ratio(phi, phi0, pair.winner) - trajectory_log_ratio(phi, phi0, pair.loser)


def sdpo_loss(phi: ToyPolicy, phi0: ToyPolicy, pairs: Sequence[PreferencePair], eta: float) -> float:
    total = 0.0
    for pair in pairs:
        margin = pair_margin(phi, phi0, pair)
        total += float(np.logaddexp(0.0, -eta * margin))  # -log sigmoid(eta * margin)
    return total


def sdpo_loss_gradient(phi: ToyPolicy, phi0: ToyPolicy, pairs: Sequence[PreferencePair],
                       eta: float) -> GradientTable:
    grad = phi.zeros_like()
    for pair in pairs:
        margin = pair_margin(phi, phi0, pair)
        # d/dm of -log sigmoid(eta*m) is -eta * sigmoid(-eta*m)
        coeff = -eta / (1.0 + np.exp(eta * margin))
        for traj, sign in ((pair.winner, 1.0), (pair.loser, -1.0)):
            for context, symbol in _segments(traj):
                if context not in grad:
                    phi.row(context)  # raises UnknownContext
                onehot_minus_p = -phi.probs(context)
                onehot_minus_p[phi.symbol_index(symbol)] += 1.0
                grad[context] += coeff * sign * onehot_minus_p
    return grad


def finite_diff_gradient(loss_fn: Callable[[ToyPolicy], float], policy: ToyPolicy,
                         step: float) -> GradientTable:
    """Central differences over every logit; the verification oracle for the
    analytic gradients (independent of them by construction)."""
    if step <= 0:
        raise ValueError(f"finite-difference step must be positive, got {step}")
    grad: GradientTable = {}
    probe = policy.copy()
    for context in policy.contexts():
        row = np.zeros(len(policy.vocab))
        for j in range(len(policy.vocab)):
            original = probe.logits[context][j]
            probe.logits[context][j] = original + step
            up = loss_fn(probe)
            probe.logits[context][j] = original - step
            down = loss_fn(probe)
            probe.logits[context][j] = original
            row[j] = (up - down) / (2.0 * step)
        grad[context] = row
    return grad


def gradient_max_rel_error(analytic: GradientTable, reference: GradientTable,
                           abs_floor: float = 1e-6) -> float:
    """Max over components of |a - r| / max(|r|, abs_floor)."""
    worst = 0.0
    for context in sorted(set(analytic) | set(reference)):
        a = analytic.get(context)
        r = reference.get(context)
        if a is None or r is None:
            raise KeyError(f"gradient tables disagree on context {context!r}")
        denom = np.maximum(np.abs(r), abs_floor)
        worst = max(worst, float((np.abs(a - r) / denom).max()))
    return worst
