"""Trajectory data model: the alternating planning/action/observation record.

A completed trajectory with H steps holds H+1 planning texts (the last one
is the final answer), H actions, and H observations. Values are immutable;
append_step and finalize return new trajectories. The on-disk form is one
JSON document per line with an explicit schema tag; unknown top-level
fields are preserved through a round trip so newer writers stay readable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any, Callable

from .actions import ActionKind, parse_action_name
from .errors import VisreasonError

SCHEMA_TAG = "trajectory@1"

IN_PROGRESS = "in_progress"
COMPLETED = "completed"
ABORTED = "aborted"
_STATUSES = (IN_PROGRESS, COMPLETED, ABORTED)

OBS_IMAGE = "image"
OBS_TEXT = "text"
OBS_STRUCTURED = "structured"
_OBS_KINDS = (OBS_IMAGE, OBS_TEXT, OBS_STRUCTURED)

TokenCounter = Callable[[str], int]


class TrajectoryError(VisreasonError):
    pass


class AppendToCompleted(TrajectoryError):
    pass


class AlreadyFinalized(TrajectoryError):
    pass


class SchemaViolation(TrajectoryError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class TokenizerFailure(TrajectoryError):
    pass


@dataclass(frozen=True)
class EpisodeInitial:
    """The initial state: question, image references, and system prompt."""

    question: str
    image_refs: tuple[str, ...]
    system_prompt: str = ""


@dataclass(frozen=True)
class Observation:
    kind: str  # image | text | structured
    payload: Any  # image ref (str), text (str), or a JSON-able structure
    produced_by: ActionKind


@dataclass(frozen=True)
class ReasoningStep:
    planning: str
    action: ActionKind
    observation: Observation | None  # None only for malformed intake records


@dataclass(frozen=True)
class Trajectory:
    initial: EpisodeInitial
    steps: tuple[ReasoningStep, ...] = ()
    final_answer: str | None = None
    status: str = IN_PROGRESS
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def depth(self) -> int:
        """Number of completed reasoning steps (H)."""
        return len(self.steps)


def new_trajectory(initial: EpisodeInitial) -> Trajectory:
    return Trajectory(initial=initial)


def append_step(traj: Trajectory, step: ReasoningStep) -> Trajectory:
    if traj.status != IN_PROGRESS:
        raise AppendToCompleted(f"cannot append to a trajectory with status {traj.status!r}")
    return replace(traj, steps=traj.steps + (step,))


def finalize(traj: Trajectory, answer: str) -> Trajectory:
    if traj.status != IN_PROGRESS:
        raise AlreadyFinalized(f"cannot finalize a trajectory with status {traj.status!r}")
    return replace(traj, final_answer=answer, status=COMPLETED)


def abort(traj: Trajectory) -> Trajectory:
    if traj.status != IN_PROGRESS:
        raise AlreadyFinalized(f"cannot abort a trajectory with status {traj.status!r}")
    return replace(traj, status=ABORTED)


@dataclass(frozen=True)
class Violation:
    code: str
    detail: str
    step_index: int | None = None


def validate(traj: Trajectory) -> list[Violation]:
    """Structural invariant check; an empty list means the trajectory is well formed."""
    out: list[Violation] = []
    if traj.status not in _STATUSES:
        out.append(Violation("bad_status", f"unknown status {traj.status!r}"))
    for i, step in enumerate(traj.steps):
        if not step.planning:
            out.append(Violation("malformed_step", "empty planning text", i))
        if step.observation is None:
            out.append(Violation("malformed_step", "missing observation", i))
        elif step.observation.kind not in _OBS_KINDS:
            out.append(Violation("malformed_step", f"bad observation kind {step.observation.kind!r}", i))
    if traj.status == COMPLETED and traj.final_answer is None:
        out.append(Violation("missing_final_answer", "completed trajectory has no final answer"))
    if traj.status == IN_PROGRESS and traj.final_answer is not None:
        out.append(Violation("premature_answer", "in-progress trajectory already has a final answer"))
    if not traj.initial.image_refs:
        out.append(Violation("missing_image", "initial state has no image"))
    return out


def token_count(traj: Trajectory, tokenizer: TokenCounter, per_image_cost: int = 0) -> int:
    """Token total over plannings, serialized actions, and textual observations.

    Image observations contribute per_image_cost each; structured payloads
    are counted as their canonical-JSON text.
    """
    segments: list[str] = []
    images = 0
    for step in traj.steps:
        segments.append(step.planning)
        segments.append(step.action.value)
        obs = step.observation
        if obs is None:
            continue
        if obs.kind == OBS_IMAGE:
            images += 1
        elif obs.kind == OBS_TEXT:
            segments.append(str(obs.payload))
        else:
            segments.append(json.dumps(obs.payload, sort_keys=True, ensure_ascii=False))
    if traj.final_answer is not None:
        segments.append(traj.final_answer)
    try:
        total = sum(tokenizer(seg) for seg in segments)
    except Exception as exc:
        raise TokenizerFailure(str(exc)) from exc
    return total + images * per_image_cost


def whitespace_tokens(text: str) -> int:
    """Default TokenCounter: whitespace-separated word count."""
    return len(text.split())


def _obs_to_doc(obs: Observation | None) -> dict[str, Any] | None:
    if obs is None:
        return None
    return {"kind": obs.kind, "payload": obs.payload, "produced_by": obs.produced_by.value}


def to_document(traj: Trajectory) -> dict[str, Any]:
    doc: dict[str, Any] = dict(traj.extra)
    doc.update(
        {
            "schema": SCHEMA_TAG,
            "question": traj.initial.question,
            "image_refs": list(traj.initial.image_refs),
            "system_prompt": traj.initial.system_prompt,
            "steps": [
                {
                    "planning": s.planning,
                    "action": s.action.value,
                    "observation": _obs_to_doc(s.observation),
                }
                for s in traj.steps
            ],
            "final_answer": traj.final_answer,
            "status": traj.status,
        }
    )
    return doc


_KNOWN_KEYS = frozenset(
    {"schema", "question", "image_refs", "system_prompt", "steps", "final_answer", "status"}
)


def _require(doc: dict[str, Any], key: str, kind: type, path: str) -> Any:
    if key not in doc:
        raise SchemaViolation(f"{path}.{key}", "missing required field")
    value = doc[key]
    if not isinstance(value, kind):
        raise SchemaViolation(f"{path}.{key}", f"expected {kind.__name__}, got {type(value).__name__}")
    return value


def _obs_from_doc(doc: Any, path: str) -> Observation | None:
    if doc is None:
        return None
    if not isinstance(doc, dict):
        raise SchemaViolation(path, "observation must be an object or null")
    kind = _require(doc, "kind", str, path)
    if kind not in _OBS_KINDS:
        raise SchemaViolation(f"{path}.kind", f"unknown observation kind {kind!r}")
    if "payload" not in doc:
        raise SchemaViolation(f"{path}.payload", "missing required field")
    produced_by = parse_action_name(_require(doc, "produced_by", str, path))
    return Observation(kind=kind, payload=doc["payload"], produced_by=produced_by)


def from_document(doc: dict[str, Any]) -> Trajectory:
    if not isinstance(doc, dict):
        raise SchemaViolation("$", "document must be a JSON object")
    if doc.get("schema") != SCHEMA_TAG:
        raise SchemaViolation("$.schema", f"expected {SCHEMA_TAG!r}, got {doc.get('schema')!r}")
    question = _require(doc, "question", str, "$")
    refs = _require(doc, "image_refs", list, "$")
    system_prompt = _require(doc, "system_prompt", str, "$")
    status = _require(doc, "status", str, "$")
    if status not in _STATUSES:
        raise SchemaViolation("$.status", f"unknown status {status!r}")
    steps_doc = _require(doc, "steps", list, "$")
    steps = []
    for i, sd in enumerate(steps_doc):
        path = f"$.steps[{i}]"
        if not isinstance(sd, dict):
            raise SchemaViolation(path, "step must be an object")
        planning = _require(sd, "planning", str, path)
        action = parse_action_name(_require(sd, "action", str, path))
        if "observation" not in sd:
            raise SchemaViolation(f"{path}.observation", "missing required field")
        steps.append(
            ReasoningStep(planning=planning, action=action,
                          observation=_obs_from_doc(sd["observation"], f"{path}.observation"))
        )
    final_answer = doc.get("final_answer")
    if final_answer is not None and not isinstance(final_answer, str):
        raise SchemaViolation("$.final_answer", "must be a string or null")
    if status == COMPLETED and final_answer is None:
        raise SchemaViolation("$.final_answer", "required when status is completed")
    extra = {k: v for k, v in doc.items() if k not in _KNOWN_KEYS}
    return Trajectory(
        initial=EpisodeInitial(question=question, image_refs=tuple(refs), system_prompt=system_prompt),
        steps=tuple(steps),
        final_answer=final_answer,
        status=status,
        extra=extra,
    )


def serialize(traj: Trajectory) -> bytes:
    """One canonical JSON line (sorted keys, utf-8, trailing newline)."""
    line = json.dumps(to_document(traj), sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return (line + "\n").encode("utf-8")


def deserialize(data: bytes) -> Trajectory:
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaViolation("$", f"not a JSON document: {exc}") from exc
    return from_document(doc)
