"""Tabular softmax policies over a small symbol vocabulary.

Every training objective and theoretical statement in the system is
realized exactly on these: probabilities, gradients, and expectations are
finite-dimensional and computable in closed form, so each property can be
checked against brute force rather than sampled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import VisreasonError


class UnknownContext(VisreasonError):
    pass


class ToyPolicy:
    """Context key -> logit vector over the vocabulary; rows are independent."""

    def __init__(self, vocab: tuple[str, ...], logits: dict[str, np.ndarray]):
        self.vocab = tuple(vocab)
        self._index = {sym: i for i, sym in enumerate(self.vocab)}
        self.logits = {ctx: np.asarray(row, dtype=np.float64).copy() for ctx, row in logits.items()}
        for ctx, row in self.logits.items():
            if row.shape != (len(self.vocab),):
                raise ValueError(f"logit row for {ctx!r} has shape {row.shape}, want ({len(self.vocab)},)")

    def contexts(self) -> list[str]:
        return sorted(self.logits)

    def symbol_index(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise UnknownContext(f"symbol {symbol!r} not in vocabulary") from None

    def row(self, context: str) -> np.ndarray:
        try:
            return self.logits[context]
        except KeyError:
            raise UnknownContext(f"context {context!r} not in policy table") from None

    def log_probs(self, context: str) -> np.ndarray:
        z = self.row(context)
        shifted = z - z.max()
        return shifted - np.log(np.exp(shifted).sum())

    def probs(self, context: str) -> np.ndarray:
        z = self.row(context)
        shifted = np.exp(z - z.max())
        return shifted / shifted.sum()

    def log_prob(self, context: str, symbol: str) -> float:
        return float(self.log_probs(context)[self.symbol_index(symbol)])

    def copy(self) -> "ToyPolicy":
        return ToyPolicy(self.vocab, self.logits)

    def zeros_like(self) -> dict[str, np.ndarray]:
        """A gradient table of the same shape as the parameters."""
        return {ctx: np.zeros(len(self.vocab)) for ctx in self.logits}


@dataclass(frozen=True)
class ToyTrajectory:
    """Context/target pairs realizing the planning and action segments.

    plannings has one entry per planning (the final answer included), so
    its length is depth + 1; actions has one entry per tool step.
    """

    plannings: tuple[tuple[str, str], ...]
    actions: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        if len(self.plannings) != len(self.actions) + 1:
            raise ValueError(
                f"need |plannings| == |actions| + 1, got {len(self.plannings)} and {len(self.actions)}"
            )

    @property
    def depth(self) -> int:
        return len(self.actions)

    @property
    def initial_context(self) -> str:
        return self.plannings[0][0]


@dataclass(frozen=True)
class PreferencePair:
    winner: ToyTrajectory
    loser: ToyTrajectory

    def __post_init__(self) -> None:
        if self.winner.initial_context != self.loser.initial_context:
            raise ValueError("preference pair must share the initial context")

    @property
    def initial_context(self) -> str:
        return self.winner.initial_context


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    eta: float = 1.0
    iterations: int = 100
    fd_step: float = 1e-5

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.learning_rate}")
        if self.eta <= 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.fd_step <= 0:
            raise ValueError(f"finite-difference step must be positive, got {self.fd_step}")
