"""Seeded construction of toy instances with certified properties.

The KL-dominance instances rely on geometric interpolation: a row
proportional to R^lam * V0^(1-lam) satisfies
KL(R || row) = (1-lam) KL(R || V0) + log Z with Z <= 1 by Holder's
inequality, so the tuned policy dominates the reference at every context
by construction. Builders still assert the property numerically.
"""

from __future__ import annotations

import numpy as np

from .gibbs import kl_divergence
from .policy import PreferencePair, ToyPolicy, ToyTrajectory
from .probes import ToyChain, expected_step_ratio, stop_probability_by_state


def random_policy(contexts: tuple[str, ...], vocab: tuple[str, ...],
                  rng: np.random.Generator, scale: float = 1.0) -> ToyPolicy:
    return ToyPolicy(vocab, {ctx: rng.normal(0.0, scale, size=len(vocab)) for ctx in contexts})


def interpolate_toward(target: ToyPolicy, base: ToyPolicy, lam: dict[str, float]) -> ToyPolicy:
    """Per-context geometric interpolation from base toward target."""
    logits = {}
    for ctx in base.logits:
        w = lam[ctx]
        logits[ctx] = w * target.log_probs(ctx) + (1.0 - w) * base.log_probs(ctx)
    return ToyPolicy(base.vocab, logits)


def _chain_contexts(n_states: int, n_vocab: int) -> tuple[tuple[str, ...], tuple[str, ...]]:
    states = tuple(f"s{i}" for i in range(n_states))
    vocab = tuple(f"v{i}" for i in range(n_vocab))
    return states, vocab


def dominance_instance(seed: int, n_states: int = 4, n_vocab: int = 4,
                       lam_range: tuple[float, float] = (0.3, 0.9)) -> ToyChain:
    """A chain where the tuned scorer KL-dominates the reference at every context."""
    rng = np.random.default_rng(seed)
    states, vocab = _chain_contexts(n_states, n_vocab)
    contexts = states + vocab
    reasoner = random_policy(contexts, vocab, rng, scale=1.0)
    reference = random_policy(contexts, vocab, rng, scale=1.0)
    lam = {ctx: float(rng.uniform(*lam_range)) for ctx in contexts}
    tuned = interpolate_toward(reasoner, reference, lam)
    chain = ToyChain(reasoner=reasoner, tuned=tuned, reference=reference,
                     states=states, start_state=states[0])
    _assert_dominance(chain)
    return chain


def _assert_dominance(chain: ToyChain) -> None:
    for ctx in chain.states + chain.vocab:
        r = chain.reasoner.probs(ctx)
        gap = kl_divergence(r, chain.reference.probs(ctx)) - kl_divergence(r, chain.tuned.probs(ctx))
        if gap < -1e-12:
            raise AssertionError(f"dominance violated at context {ctx!r} (gap {gap})")


def violation_instance(seed: int, n_states: int = 4, n_vocab: int = 4) -> ToyChain:
    """A chain violating KL dominance at one state, with a negative expected increment there.

    Action contexts keep tuned == reference (zero contribution), and the
    bad state's tuned row concentrates on the reasoner's least likely
    symbol while the reference stays uniform.
    """
    rng = np.random.default_rng(seed)
    states, vocab = _chain_contexts(n_states, n_vocab)
    contexts = states + vocab
    reasoner = random_policy(contexts, vocab, rng, scale=1.0)
    reference = ToyPolicy(vocab, {ctx: np.zeros(len(vocab)) for ctx in contexts})
    tuned_logits = {ctx: np.zeros(len(vocab)) for ctx in contexts}
    bad_state = states[0]
    worst_symbol = int(np.argmin(reasoner.probs(bad_state)))
    row = np.full(len(vocab), -2.0)
    row[worst_symbol] = 2.0
    tuned_logits[bad_state] = row
    tuned = ToyPolicy(vocab, tuned_logits)
    chain = ToyChain(reasoner=reasoner, tuned=tuned, reference=reference,
                     states=states, start_state=bad_state)
    if expected_step_ratio(chain, bad_state) >= 0:
        raise AssertionError("violation instance failed to produce a negative expectation")
    return chain


def stopping_instance(seed: int, eps: float = 0.5, n_states: int = 4, n_vocab: int = 4,
                      min_stop_probability: float = 0.25) -> tuple[ToyChain, float]:
    """A dominance chain whose per-state stop probability is certified >= the floor.

    The tuned policy starts as a mild interpolation toward the reasoner and
    is pulled toward the reference (lam -> lam/2) until every state stops
    with probability at least min_stop_probability, which bounds
    P(an episode reaches cap H) <= (1 - floor)^H.
    """
    rng = np.random.default_rng(seed)
    states, vocab = _chain_contexts(n_states, n_vocab)
    contexts = states + vocab
    reasoner = random_policy(contexts, vocab, rng, scale=1.0)
    reference = random_policy(contexts, vocab, rng, scale=0.5)
    lam = {ctx: float(rng.uniform(0.1, 0.3)) for ctx in contexts}
    for _ in range(40):
        tuned = interpolate_toward(reasoner, reference, lam)
        chain = ToyChain(reasoner=reasoner, tuned=tuned, reference=reference,
                         states=states, start_state=states[0])
        if min(stop_probability_by_state(chain, eps).values()) >= min_stop_probability:
            _assert_dominance(chain)
            return chain, eps
        lam = {ctx: w * 0.5 for ctx, w in lam.items()}
    raise AssertionError("could not certify the stop-probability floor")


def sft_fixture(seed: int, n_trajectories: int = 6, n_vocab: int = 4) -> tuple[ToyPolicy, list[ToyTrajectory]]:
    """A random starting policy and a small consistent trajectory dataset."""
    rng = np.random.default_rng(seed)
    states, vocab = _chain_contexts(4, n_vocab)
    contexts = states + vocab
    policy = random_policy(contexts, vocab, rng, scale=0.5)
    dataset = []
    for _ in range(n_trajectories):
        depth = int(rng.integers(1, 4))
        plannings = []
        actions = []
        state = str(rng.choice(states))
        for _ in range(depth):
            t_sym = str(rng.choice(vocab))
            a_sym = str(rng.choice(vocab))
            plannings.append((state, t_sym))
            actions.append((t_sym, a_sym))
            state = str(states[int(rng.integers(0, len(states)))])
        plannings.append((state, str(rng.choice(vocab))))
        dataset.append(ToyTrajectory(plannings=tuple(plannings), actions=tuple(actions)))
    return policy, dataset


def dpo_fixture(seed: int, n_pairs: int = 6, n_vocab: int = 4) -> tuple[ToyPolicy, list[PreferencePair]]:
    """A reference policy and preference pairs whose winners differ from losers."""
    rng = np.random.default_rng(seed)
    states, vocab = _chain_contexts(4, n_vocab)
    contexts = states + vocab
    phi0 = random_policy(contexts, vocab, rng, scale=0.5)
    pairs = []
    for _ in range(n_pairs):
        s1 = str(rng.choice(states))
        winner = _random_trajectory(rng, s1, states, vocab, depth=int(rng.integers(1, 3)))
        loser = _random_trajectory(rng, s1, states, vocab, depth=int(rng.integers(1, 3)))
        pairs.append(PreferencePair(winner=winner, loser=loser))
    return phi0, pairs


def _random_trajectory(rng: np.random.Generator, s1: str, states: tuple[str, ...],
                       vocab: tuple[str, ...], depth: int) -> ToyTrajectory:
    plannings = []
    actions = []
    state = s1
    for _ in range(depth):
        t_sym = str(rng.choice(vocab))
        plannings.append((state, t_sym))
        actions.append((t_sym, str(rng.choice(vocab))))
        state = str(states[int(rng.integers(0, len(states)))])
    plannings.append((state, str(rng.choice(vocab))))
    return ToyTrajectory(plannings=tuple(plannings), actions=tuple(actions))
