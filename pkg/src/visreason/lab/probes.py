"""Monte-Carlo and exact probes of the stopping-time theory.

A ToyChain is a finite episode process: a reasoner policy proposes a
planning symbol from the current state context and an action symbol from
the planning symbol's own context; a fixed mixing rule maps (state,
planning, action) to the next state. On these chains the conditional
expectation of the reward increment is an exact finite sum, so the
submartingale condition (KL dominance of the tuned scorer over the
reference) and almost-sure stopping are checkable instead of trusted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernels
from .policy import ToyPolicy


@dataclass(frozen=True)
class ToyChain:
    reasoner: ToyPolicy
    tuned: ToyPolicy
    reference: ToyPolicy
    states: tuple[str, ...]
    start_state: str

    def __post_init__(self) -> None:
        vocab = self.reasoner.vocab
        if self.tuned.vocab != vocab or self.reference.vocab != vocab:
            raise ValueError("all chain policies must share one vocabulary")
        needed = set(self.states) | set(vocab)
        for name, policy in (("reasoner", self.reasoner), ("tuned", self.tuned),
                             ("reference", self.reference)):
            missing = needed - set(policy.logits)
            if missing:
                raise ValueError(f"{name} policy lacks contexts {sorted(missing)}")
        if self.start_state not in self.states:
            raise ValueError(f"start state {self.start_state!r} not in states")

    @property
    def vocab(self) -> tuple[str, ...]:
        return self.reasoner.vocab

    def next_state_table(self) -> np.ndarray:
        """Deterministic transition: index-mixed (state, planning, action) -> state."""
        n_states = len(self.states)
        n_vocab = len(self.vocab)
        table = np.empty((n_states, n_vocab, n_vocab), dtype=np.int32)
        for s in range(n_states):
            for t in range(n_vocab):
                for a in range(n_vocab):
                    table[s, t, a] = (3 * s + 5 * t + 7 * a + 1) % n_states
        return table

    def ratio_tables(self) -> tuple[np.ndarray, np.ndarray]:
        """(plan_ratio[s, t], act_ratio[t, a]) of tuned-minus-reference log-probs."""
        plan = np.stack([self.tuned.log_probs(s) - self.reference.log_probs(s) for s in self.states])
        act = np.stack([self.tuned.log_probs(t) - self.reference.log_probs(t) for t in self.vocab])
        return plan, act

    def reasoner_tables(self) -> tuple[np.ndarray, np.ndarray]:
        plan = np.stack([self.reasoner.probs(s) for s in self.states])
        act = np.stack([self.reasoner.probs(t) for t in self.vocab])
        return plan, act


@dataclass(frozen=True)
class StateExpectation:
    state: str
    exact: float
    estimate: float
    stderr: float
    trials: int


def expected_step_ratio(chain: ToyChain, state: str) -> float:
    """Exact E[step log ratio | state] under the reasoner, by direct summation."""
    r_plan = chain.reasoner.probs(state)
    plan_gap = chain.tuned.log_probs(state) - chain.reference.log_probs(state)
    total = float(r_plan @ plan_gap)
    for t_idx, t_sym in enumerate(chain.vocab):
        r_act = chain.reasoner.probs(t_sym)
        act_gap = chain.tuned.log_probs(t_sym) - chain.reference.log_probs(t_sym)
        total += float(r_plan[t_idx] * (r_act @ act_gap))
    return total


def submartingale_probe(phi_hat: ToyPolicy, phi0: ToyPolicy, reasoner: ToyPolicy,
                        states: tuple[str, ...], eta: float = 1.0, trials: int = 2000,
                        seed: int = 0) -> list[StateExpectation]:
    """Per-state E[reward increment]: exact sum plus a Monte-Carlo estimate."""
    chain = ToyChain(reasoner=reasoner, tuned=phi_hat, reference=phi0,
                     states=states, start_state=states[0])
    rng = np.random.default_rng(seed)
    out: list[StateExpectation] = []
    for state in states:
        exact = eta * expected_step_ratio(chain, state)
        samples = _sample_step_ratios(chain, state, trials, rng) * eta
        stderr = float(samples.std(ddof=1) / np.sqrt(trials)) if trials > 1 else float("inf")
        out.append(StateExpectation(state=state, exact=exact,
                                    estimate=float(samples.mean()), stderr=stderr,
                                    trials=trials))
    return out


def _sample_step_ratios(chain: ToyChain, state: str, trials: int,
                        rng: np.random.Generator) -> np.ndarray:
    plan_probs = chain.reasoner.probs(state)
    plan_gap = chain.tuned.log_probs(state) - chain.reference.log_probs(state)
    t_idx = rng.choice(len(chain.vocab), size=trials, p=plan_probs)
    act_rows = np.stack([chain.reasoner.probs(t) for t in chain.vocab])
    act_gap = np.stack([chain.tuned.log_probs(t) - chain.reference.log_probs(t)
                        for t in chain.vocab])
    u = rng.random(trials)
    cum = act_rows.cumsum(axis=1)
    a_idx = np.minimum((cum[t_idx] <= u[:, None]).sum(axis=1), len(chain.vocab) - 1)
    return plan_gap[t_idx] + act_gap[t_idx, a_idx]


@dataclass(frozen=True)
class StoppingSimResult:
    episodes: int
    cap: int
    eps: float
    histogram: dict[int, int]
    cap_hits: int
    mean_steps: float
    kernel_backend: str

    @property
    def cap_hit_fraction(self) -> float:
        return self.cap_hits / self.episodes


def stopping_time_sim(phi_hat: ToyPolicy, phi0: ToyPolicy, reasoner: ToyPolicy,
                      eps: float, episodes: int, cap: int, seed: int = 0,
                      states: tuple[str, ...] | None = None,
                      start_state: str | None = None) -> StoppingSimResult:
    """Simulate stopping times of the verifier rule over the toy chain.

    eps=0 is accepted here (unlike VerifierConfig) so the degenerate
    never-stopping regime stays testable.
    """
    if episodes < 1 or cap < 1:
        raise ValueError("episodes and cap must both be >= 1")
    if states is None:
        states = tuple(sorted(set(reasoner.logits) - set(reasoner.vocab)))
    chain = ToyChain(reasoner=reasoner, tuned=phi_hat, reference=phi0,
                     states=states, start_state=start_state or states[0])
    plan_probs, act_probs = chain.reasoner_tables()
    plan_ratio, act_ratio = chain.ratio_tables()
    uniforms = np.random.default_rng(seed).random((episodes, cap, 2))
    steps, stopped = kernels.simulate_chain(
        plan_probs.cumsum(axis=1), act_probs.cumsum(axis=1),
        plan_ratio, act_ratio, chain.next_state_table(),
        chain.states.index(chain.start_state), eps, cap, uniforms,
    )
    cap_hits = int((stopped == 0).sum())
    counts = np.bincount(steps, minlength=cap + 1)
    histogram = {h: int(c) for h, c in enumerate(counts) if c > 0}
    return StoppingSimResult(
        episodes=episodes, cap=cap, eps=eps, histogram=histogram,
        cap_hits=cap_hits, mean_steps=float(steps.mean()),
        kernel_backend=kernels.backend_name(),
    )


def stop_probability_by_state(chain: ToyChain, eps: float) -> dict[str, float]:
    """Exact P(|step log ratio| < eps | state) under the reasoner, per state."""
    plan_probs, act_probs = chain.reasoner_tables()
    plan_ratio, act_ratio = chain.ratio_tables()
    out: dict[str, float] = {}
    for s, state in enumerate(chain.states):
        ratios = plan_ratio[s][:, None] + act_ratio  # (t, a)
        joint = plan_probs[s][:, None] * act_probs
        out[state] = float(joint[np.abs(ratios) < eps].sum())
    return out
