"""The episode loop: plan, act, observe, verify, stop.

Each iteration generates a planning text, parses its tool directive,
executes the tool, scores the step under the tuned/reference verifier
pair, and stops once the absolute step log ratio falls below epsilon (or
a safety cap is hit — termination is guaranteed almost surely but carries
no hard bound, so the cap realizes it operationally). The final answer is
generated only after the loop exits. Model and tool failures abort the
episode but preserve the partial trajectory in the report.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any

from .errors import VisreasonError
from .gateway import DecodeConfig, Gateway, GatewayError, ModelHandle
from .toolbox import ToolFailure, Toolbox, parse_planning
from .trajectory import (
    COMPLETED,
    EpisodeInitial,
    Observation,
    ReasoningStep,
    Trajectory,
    abort,
    append_step,
    finalize,
    from_document,
    new_trajectory,
    to_document,
)
from .verifier import StepScore, VerifierConfig, reward_delta, should_stop, step_log_ratio

REPORT_SCHEMA = "episode-report@1"

STOP_VERIFIER = "verifier_stop"
STOP_MAX_STEPS = "max_steps"
STOP_MODEL_ERROR = "model_error"
STOP_TOOL_ERROR = "tool_error"
STOP_REASONER_ANSWER = "reasoner_answer"

PLANNING_ONLY = "planning_only"
FULL_HISTORY = "full_history"

ACTION_INSTRUCTION = "Respond with exactly one fenced action block (```action ... ```)."
FINAL_INSTRUCTION = "Respond with the final answer in one fenced answer block (```answer ... ```)."


class ModelFailure(VisreasonError):
    pass


@dataclass(frozen=True)
class VerifierPair:
    tuned: ModelHandle
    reference: ModelHandle


@dataclass(frozen=True)
class EngineConfig:
    verifier: VerifierConfig = VerifierConfig()
    max_steps: int = 10
    decode: DecodeConfig = DecodeConfig()
    action_context: str = PLANNING_ONLY
    verify: bool = True  # False: generation-only runs (no scoring, no gating)
    extra_instruction: str = ""  # appended to prompts, never stored in the trajectory

    def __post_init__(self) -> None:
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.action_context not in (PLANNING_ONLY, FULL_HISTORY):
            raise ValueError(f"unknown action_context {self.action_context!r}")


@dataclass
class EpisodeReport:
    trajectory: Trajectory
    step_scores: list[StepScore] = field(default_factory=list)
    final_score: StepScore | None = None
    deltas: list[float] = field(default_factory=list)
    stop_reason: str = STOP_VERIFIER
    error: str | None = None


def render_context(traj: Trajectory) -> str:
    """Deterministic prompt rendering of the current state."""
    lines: list[str] = []
    if traj.initial.system_prompt:
        lines += ["[system]", traj.initial.system_prompt]
    lines += ["[question]", traj.initial.question, "[images]"]
    lines += [f"image:{ref}" for ref in traj.initial.image_refs]
    for i, step in enumerate(traj.steps, start=1):
        lines += [f"[step {i}]", "planning:", step.planning, f"action: {step.action.value}"]
        lines.append(_render_observation(step.observation))
    return "\n".join(lines) + "\n"


def _render_observation(obs: Observation | None) -> str:
    if obs is None:
        return "observation: (missing)"
    if obs.kind == "image":
        return f"observation(image): image:{obs.payload}"
    if obs.kind == "text":
        return f"observation(text): {obs.payload}"
    return "observation(structured): " + json.dumps(obs.payload, sort_keys=True, ensure_ascii=False)


def _with_instruction(base: str, instruction: str, cfg: EngineConfig) -> str:
    prompt = base + instruction
    if cfg.extra_instruction:
        prompt += " " + cfg.extra_instruction
    return prompt


def step_once(traj: Trajectory, reasoner: ModelHandle, toolbox: Toolbox,
              gateway: Gateway, cfg: EngineConfig) -> tuple[ReasoningStep | None, str, Trajectory]:
    """One planning/action/observation cycle.

    Returns (step, planning_text, new trajectory); step is None when the
    reasoner emitted a final answer instead of a directive (the planning
    text then carries the raw emission). Gateway errors surface as
    ModelFailure, directive and tool problems as ToolFailure subclasses.
    """
    context = _with_instruction(render_context(traj), ACTION_INSTRUCTION, cfg)
    try:
        planning = gateway.generate(reasoner, context, cfg.decode)
    except GatewayError as exc:
        raise ModelFailure(f"reasoner failed: {exc}") from exc
    parsed = parse_planning(planning)
    if parsed.is_answer:
        return None, planning, traj
    obs = toolbox.execute(parsed.invocation)
    step = ReasoningStep(planning=planning, action=parsed.invocation.action, observation=obs)
    return step, planning, append_step(traj, step)


def _score_step(step: ReasoningStep, prev_context: str, pair: VerifierPair,
                gateway: Gateway, cfg: EngineConfig) -> StepScore:
    if cfg.action_context == PLANNING_ONLY:
        action_ctx = step.planning
    else:
        action_ctx = prev_context + step.planning
    action_name = step.action.value
    try:
        return StepScore(
            planning_tuned=gateway.score_sequence(pair.tuned, prev_context, step.planning),
            planning_ref=gateway.score_sequence(pair.reference, prev_context, step.planning),
            action_tuned=gateway.score_sequence(pair.tuned, action_ctx, action_name),
            action_ref=gateway.score_sequence(pair.reference, action_ctx, action_name),
        )
    except GatewayError as exc:
        raise ModelFailure(f"verifier scoring failed: {exc}") from exc


def _score_final(answer_text: str, context: str, pair: VerifierPair, gateway: Gateway) -> StepScore:
    try:
        return StepScore(
            planning_tuned=gateway.score_sequence(pair.tuned, context, answer_text),
            planning_ref=gateway.score_sequence(pair.reference, context, answer_text),
            final=True,
        )
    except GatewayError as exc:
        raise ModelFailure(f"verifier scoring failed: {exc}") from exc


def run_episode(initial: EpisodeInitial, reasoner: ModelHandle, verifier_pair: VerifierPair | None,
                toolbox: Toolbox, gateway: Gateway, cfg: EngineConfig = EngineConfig(),
                resume: Trajectory | None = None) -> EpisodeReport:
    """Run one full episode and return its report (never raises on model/tool failures).

    `resume` continues an in-progress trajectory (used by error induction
    to branch from a shared prefix); its initial state must match.
    """
    if not initial.image_refs:
        raise ValueError("initial state must reference at least one image")
    for ref in initial.image_refs:
        if ref not in toolbox.store:
            raise ValueError(f"initial image ref {ref!r} not in store")
    if cfg.verify and verifier_pair is None:
        raise ValueError("verification requested but no verifier pair supplied")
    if resume is not None:
        if resume.status != "in_progress":
            raise ValueError("can only resume an in-progress trajectory")
        if resume.initial != initial:
            raise ValueError("resume trajectory has a different initial state")

    traj = resume if resume is not None else new_trajectory(initial)
    report = EpisodeReport(trajectory=traj)
    answered_text: str | None = None
    try:
        for h in range(traj.depth + 1, cfg.max_steps + 1):
            context = _with_instruction(render_context(traj), ACTION_INSTRUCTION, cfg)
            step, planning, traj = step_once(traj, reasoner, toolbox, gateway, cfg)
            report.trajectory = traj
            if step is None:
                answered_text = planning
                report.stop_reason = STOP_REASONER_ANSWER
                break
            if cfg.verify:
                score = _score_step(step, context, verifier_pair, gateway, cfg)
                report.step_scores.append(score)
                report.deltas.append(reward_delta(score, cfg.verifier))
                if should_stop(step_log_ratio(score), cfg.verifier):
                    report.stop_reason = STOP_VERIFIER
                    break
            if h == cfg.max_steps:
                report.stop_reason = STOP_MAX_STEPS
                break
        else:
            report.stop_reason = STOP_MAX_STEPS

        final_context = _with_instruction(render_context(traj), FINAL_INSTRUCTION, cfg)
        if answered_text is None:
            try:
                answered_text = gateway.generate(reasoner, final_context, cfg.decode)
            except GatewayError as exc:
                raise ModelFailure(f"final answer generation failed: {exc}") from exc
        parsed_answer = _extract_answer(answered_text)
        traj = finalize(traj, parsed_answer)
        report.trajectory = traj
        if cfg.verify:
            report.final_score = _score_final(answered_text, final_context, verifier_pair, gateway)
    except ModelFailure as exc:
        report.stop_reason = STOP_MODEL_ERROR
        report.error = str(exc)
        report.trajectory = abort(traj)
    except ToolFailure as exc:
        report.stop_reason = STOP_TOOL_ERROR
        report.error = str(exc)
        report.trajectory = abort(traj)
    return report


def _extract_answer(text: str) -> str:
    """Prefer the fenced answer block; fall back to the raw emission."""
    try:
        parsed = parse_planning(text)
    except ToolFailure:
        return text.strip()
    if parsed.is_answer:
        return parsed.answer
    return text.strip()


def run_batch(initials: list[EpisodeInitial], reasoner: ModelHandle, verifier_pair: VerifierPair | None,
              toolbox: Toolbox, gateway: Gateway, cfg: EngineConfig = EngineConfig(),
              jobs: int = 1) -> list[EpisodeReport]:
    """Run many episodes with bounded parallelism; results keep input order."""
    if jobs <= 1:
        return [run_episode(s1, reasoner, verifier_pair, toolbox, gateway, cfg) for s1 in initials]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(run_episode, s1, reasoner, verifier_pair, toolbox, gateway, cfg)
                   for s1 in initials]
        return [f.result() for f in futures]


# -- report serialization ---------------------------------------------------


def _score_to_doc(score: StepScore) -> dict[str, Any]:
    return {
        "planning_tuned": score.planning_tuned,
        "planning_ref": score.planning_ref,
        "action_tuned": score.action_tuned,
        "action_ref": score.action_ref,
        "final": score.final,
    }


def _score_from_doc(doc: dict[str, Any]) -> StepScore:
    return StepScore(
        planning_tuned=doc["planning_tuned"],
        planning_ref=doc["planning_ref"],
        action_tuned=doc["action_tuned"],
        action_ref=doc["action_ref"],
        final=doc["final"],
    )


def report_to_json(report: EpisodeReport) -> str:
    doc = {
        "schema": REPORT_SCHEMA,
        "trajectory": to_document(report.trajectory),
        "step_scores": [_score_to_doc(s) for s in report.step_scores],
        "final_score": _score_to_doc(report.final_score) if report.final_score else None,
        "deltas": report.deltas,
        "stop_reason": report.stop_reason,
        "error": report.error,
    }
    return json.dumps(doc, sort_keys=True, ensure_ascii=False, indent=2) + "\n"


def report_from_json(text: str) -> EpisodeReport:
    doc = json.loads(text)
    return EpisodeReport(
        trajectory=from_document(doc["trajectory"]),
        step_scores=[_score_from_doc(s) for s in doc["step_scores"]],
        final_score=_score_from_doc(doc["final_score"]) if doc.get("final_score") else None,
        deltas=list(doc["deltas"]),
        stop_reason=doc["stop_reason"],
        error=doc.get("error"),
    )
