"""Desk-scale training lab: exact losses, gradients, and theory probes."""

from .gibbs import NumericalOverflow, SupportMismatch, gibbs_optimum, kl_divergence, kl_objective
from .instances import (
    dominance_instance,
    dpo_fixture,
    interpolate_toward,
    random_policy,
    sft_fixture,
    stopping_instance,
    violation_instance,
)
from .io import INSTANCE_SCHEMA, BadInstanceFile, ToyInstance, load_instance, save_instance
from .losses import (
    EmptyDataset,
    finite_diff_gradient,
    gradient_max_rel_error,
    pair_margin,
    sdpo_loss,
    sdpo_loss_gradient,
    sft_loss,
    sft_objective,
    sft_objective_gradient,
    toy_reward,
    trajectory_log_ratio,
)
from .policy import PreferencePair, ToyPolicy, ToyTrajectory, TrainConfig, UnknownContext
from .probes import (
    StateExpectation,
    StoppingSimResult,
    ToyChain,
    expected_step_ratio,
    stop_probability_by_state,
    stopping_time_sim,
    submartingale_probe,
)
from .training import DivergenceDetected, train_sdpo, train_sft

__all__ = [
    "BadInstanceFile",
    "DivergenceDetected",
    "EmptyDataset",
    "INSTANCE_SCHEMA",
    "NumericalOverflow",
    "PreferencePair",
    "StateExpectation",
    "StoppingSimResult",
    "SupportMismatch",
    "ToyChain",
    "ToyInstance",
    "ToyPolicy",
    "ToyTrajectory",
    "TrainConfig",
    "UnknownContext",
    "dominance_instance",
    "dpo_fixture",
    "expected_step_ratio",
    "finite_diff_gradient",
    "gibbs_optimum",
    "gradient_max_rel_error",
    "interpolate_toward",
    "kl_divergence",
    "kl_objective",
    "load_instance",
    "pair_margin",
    "random_policy",
    "save_instance",
    "sdpo_loss",
    "sdpo_loss_gradient",
    "sft_fixture",
    "sft_loss",
    "sft_objective",
    "sft_objective_gradient",
    "stop_probability_by_state",
    "stopping_instance",
    "stopping_time_sim",
    "submartingale_probe",
    "toy_reward",
    "train_sdpo",
    "train_sft",
    "trajectory_log_ratio",
    "violation_instance",
]
