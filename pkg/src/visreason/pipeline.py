"""Three-stage dataset construction: generate, curate, export.

Raw trajectory records flow through structural flattening, fragment
merging, validation, the no-tool-use filter, and the token cap; survivors
pass a judge that keeps only correct final answers; accepted trajectories
export as supervised records, and error induction branches each winner at
an intermediate step to synthesize a wrong-answer twin for preference
pairs. Every drop lands in a ledger (record_id, stage, rule) so counts
reconcile exactly, and all stages are deterministic: records are keyed
and ordered by content hash, so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .engine import (
    EngineConfig,
    EpisodeReport,
    VerifierPair,
    run_episode,
)
from .errors import VisreasonError
from .gateway import Gateway, JudgeResult, ModelHandle, UnparseableVerdict
from .images import ImageStore, decode_png
from .toolbox import Toolbox
from .trajectory import (
    COMPLETED,
    SchemaViolation,
    TokenCounter,
    Trajectory,
    from_document,
    to_document,
    token_count,
    validate,
    whitespace_tokens,
)

RECORD_SCHEMA = "pipeline-record@1"
DPO_SCHEMA = "dpo-record@1"
STATS_SCHEMA = "pipeline-stats@1"

TOKEN_LIMIT = 20000

RULE_MALFORMED = "malformed"
RULE_NO_TOOL_USE = "no_tool_use"
RULE_TOKEN_LIMIT = "token_limit"
RULE_JUDGE_INCORRECT = "judge_incorrect"
RULE_JUDGE_UNPARSEABLE = "judge_unparseable"
RULE_EMPTY_IMAGE = "empty_image"
RULE_PREFIX_MISMATCH = "prefix_mismatch"
RULE_INDUCTION_FAILED = "induction_failed"


class PipelineError(VisreasonError):
    pass


class UnreadableDataset(PipelineError):
    pass


class InductionFailed(PipelineError):
    pass


@dataclass(frozen=True)
class SeedRecord:
    task_type: str
    question: str
    image_refs: tuple[str, ...]
    label: str

    def __post_init__(self) -> None:
        if not self.label:
            raise ValueError("seed label must be nonempty")
        if not self.image_refs:
            raise ValueError("seed must reference at least one image")


@dataclass(frozen=True)
class DropEntry:
    record_id: str
    stage: str
    rule: str


@dataclass
class TrajectoryRecord:
    """One trajectory with its seed metadata; the unit every stage passes along."""

    record_id: str
    task_type: str
    question: str
    label: str
    trajectory: Trajectory
    provenance: dict[str, str] = field(default_factory=dict)


@dataclass
class DpoRecord:
    record_id: str
    task_type: str
    question: str
    label: str
    chosen: Trajectory
    rejected: Trajectory
    branch_point: int
    provenance: dict[str, str] = field(default_factory=dict)


def canonical_json(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def content_id(doc: Any) -> str:
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()


# -- seed ingestion ----------------------------------------------------------


def read_seed_manifest(root: str | Path, store: ImageStore) -> list[SeedRecord]:
    """Load (task_type, question, image, label) tuples from a dataset directory.

    The directory holds manifest.jsonl plus the image files its entries
    reference by relative path; images register in the store and seeds
    carry their content refs.
    """
    root = Path(root)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise UnreadableDataset(f"no manifest.jsonl under {root}")
    seeds: list[SeedRecord] = []
    for i, line in enumerate(manifest.read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise UnreadableDataset(f"{manifest}:{i + 1}: {exc}") from exc
        image_field = doc["image"]
        names = image_field if isinstance(image_field, list) else [image_field]
        refs = tuple(store.put(decode_png((root / name).read_bytes())) for name in names)
        seeds.append(SeedRecord(task_type=str(doc.get("task_type", "unknown")),
                                question=str(doc["question"]), image_refs=refs,
                                label=str(doc["label"])))
    return seeds


# -- stage 1: generation -----------------------------------------------------


def generate_trajectories(
    seeds: Sequence[SeedRecord],
    reasoner: ModelHandle,
    toolbox: Toolbox,
    gateway: Gateway,
    cfg: EngineConfig,
    verifier_pair: VerifierPair | None = None,
    system_prompt: str = "",
) -> tuple[list[dict[str, Any]], list[dict[str, str]]]:
    """One episode per seed; failures become error records, never exceptions.

    Returns (raw record docs, error records). Verifier gating applies only
    when the config asks for verification and a pair is supplied.
    """
    from .trajectory import EpisodeInitial

    raw: list[dict[str, Any]] = []
    errors: list[dict[str, str]] = []
    for index, seed in enumerate(seeds):
        initial = EpisodeInitial(question=seed.question, image_refs=seed.image_refs,
                                 system_prompt=system_prompt)
        try:
            report: EpisodeReport = run_episode(initial, reasoner, verifier_pair,
                                                toolbox, gateway, cfg)
        except Exception as exc:  # per-seed isolation
            errors.append({"seed_index": str(index), "error": str(exc)})
            continue
        if report.error is not None:
            errors.append({"seed_index": str(index), "error": report.error,
                           "stop_reason": report.stop_reason})
            continue
        doc = {
            "schema": RECORD_SCHEMA,
            "task_type": seed.task_type,
            "question": seed.question,
            "label": seed.label,
            "trajectory": to_document(report.trajectory),
            "provenance": {"generator": reasoner.model_id},
        }
        doc["record_id"] = content_id({k: v for k, v in doc.items() if k != "record_id"})
        raw.append(doc)
    raw.sort(key=lambda d: d["record_id"])
    return raw, errors


# -- stage 2: preprocessing --------------------------------------------------


def _flatten_steps(steps: Any) -> list[Any]:
    flat: list[Any] = []
    for item in steps if isinstance(steps, list) else [steps]:
        if isinstance(item, list):
            flat.extend(_flatten_steps(item))
        else:
            flat.append(item)
    return flat


def _merge_fragments(doc: dict[str, Any]) -> dict[str, Any]:
    """Fold planning-only fragments into the next complete step's planning.

    A trailing fragment (nothing follows it) merges into the final answer,
    which is itself the last planning of the trajectory.
    """
    steps = doc.get("steps")
    if not isinstance(steps, list):
        return doc
    merged: list[Any] = []
    pending: list[str] = []
    for step in steps:
        is_fragment = (
            isinstance(step, dict)
            and isinstance(step.get("planning"), str)
            and "action" not in step
            and "observation" not in step
        )
        if is_fragment:
            pending.append(step["planning"])
            continue
        if pending and isinstance(step, dict) and isinstance(step.get("planning"), str):
            step = dict(step)
            step["planning"] = "\n".join(pending + [step["planning"]])
            pending = []
        merged.append(step)
    out = dict(doc)
    out["steps"] = merged
    if pending:
        tail = "\n".join(pending)
        answer = out.get("final_answer")
        out["final_answer"] = tail + "\n" + answer if isinstance(answer, str) else tail
    return out


def normalize_raw_doc(doc: dict[str, Any]) -> dict[str, Any]:
    """Structural flattening and fragment merging, before any validation."""
    traj = doc.get("trajectory")
    if not isinstance(traj, dict):
        return doc
    traj = dict(traj)
    if "steps" in traj:
        traj["steps"] = _flatten_steps(traj["steps"])
    traj = _merge_fragments(traj)
    out = dict(doc)
    out["trajectory"] = traj
    return out


def _record_id_for(doc: dict[str, Any]) -> str:
    given = doc.get("record_id")
    if isinstance(given, str) and given:
        return given
    return content_id({k: v for k, v in doc.items() if k != "record_id"})


def preprocess(
    raw_docs: Iterable[dict[str, Any]],
    tokenizer: TokenCounter = whitespace_tokens,
    max_tokens: int = TOKEN_LIMIT,
    per_image_cost: int = 0,
) -> tuple[list[TrajectoryRecord], list[DropEntry]]:
    """Flatten, merge, validate, then drop no-tool-use and over-limit records."""
    cleaned: list[TrajectoryRecord] = []
    drops: list[DropEntry] = []
    for doc in raw_docs:
        doc = normalize_raw_doc(dict(doc))
        doc["record_id"] = _record_id_for(doc)
        record_id = doc["record_id"]
        try:
            traj = from_document(doc.get("trajectory") or {})
        except SchemaViolation:
            drops.append(DropEntry(record_id, "preprocess", RULE_MALFORMED))
            continue
        if validate(traj) or traj.status != COMPLETED:
            drops.append(DropEntry(record_id, "preprocess", RULE_MALFORMED))
            continue
        if traj.depth == 0:
            drops.append(DropEntry(record_id, "preprocess", RULE_NO_TOOL_USE))
            continue
        if token_count(traj, tokenizer, per_image_cost) > max_tokens:
            drops.append(DropEntry(record_id, "preprocess", RULE_TOKEN_LIMIT))
            continue
        provenance = doc.get("provenance") or {}
        cleaned.append(TrajectoryRecord(
            record_id=record_id,
            task_type=str(doc.get("task_type", "unknown")),
            question=str(doc.get("question", "")),
            label=str(doc.get("label", "")),
            trajectory=traj,
            provenance={str(k): str(v) for k, v in provenance.items()},
        ))
    cleaned.sort(key=lambda r: r.record_id)
    return cleaned, drops


# -- stage 3: judge filtering ------------------------------------------------


def judge_filter(
    records: Sequence[TrajectoryRecord],
    judge: ModelHandle,
    gateway: Gateway,
) -> tuple[list[TrajectoryRecord], list[TrajectoryRecord], list[TrajectoryRecord], list[DropEntry]]:
    """Split records into (accepted, rejected, quarantined) by judge verdict."""
    accepted: list[TrajectoryRecord] = []
    rejected: list[TrajectoryRecord] = []
    quarantined: list[TrajectoryRecord] = []
    drops: list[DropEntry] = []
    for record in records:
        try:
            result: JudgeResult = gateway.judge(judge, record.trajectory, record.label)
        except UnparseableVerdict:
            quarantined.append(record)
            drops.append(DropEntry(record.record_id, "judge", RULE_JUDGE_UNPARSEABLE))
            continue
        if result.verdict == "correct":
            stamped = TrajectoryRecord(
                record_id=record.record_id, task_type=record.task_type,
                question=record.question, label=record.label,
                trajectory=record.trajectory,
                provenance={**record.provenance, "judge_verdict_hash": result.prompt_hash},
            )
            accepted.append(stamped)
        else:
            rejected.append(record)
            drops.append(DropEntry(record.record_id, "judge", RULE_JUDGE_INCORRECT))
    return accepted, rejected, quarantined, drops


# -- stage 4: supervised export ----------------------------------------------


def build_sft(accepted: Sequence[TrajectoryRecord]) -> list[TrajectoryRecord]:
    """Accepted records become supervised records verbatim (states intact)."""
    out = []
    for record in accepted:
        if "judge_verdict_hash" not in record.provenance:
            raise PipelineError(f"record {record.record_id} was not judge-filtered")
        out.append(record)
    return out


# -- stage 5: error induction --------------------------------------------------

ERROR_INDUCTION_INSTRUCTION = (
    "Continue the reasoning from this point but steer it wrong: "
    "take plausible-looking steps that end in an INCORRECT final answer."
)


def induce_error(
    winner: TrajectoryRecord,
    generator: ModelHandle,
    toolbox: Toolbox,
    gateway: Gateway,
    branch_point: int,
    cfg: EngineConfig,
    retries: int = 3,
) -> Trajectory:
    """Branch the winner at branch_point and continue toward a wrong answer.

    Keeps the shared prefix intact (same initial state, same first steps)
    and retries generation up to `retries` times; if every candidate still
    answers correctly, raises InductionFailed.
    """
    depth = winner.trajectory.depth
    if not 1 <= branch_point <= depth:
        raise ValueError(f"branch_point must lie in 1..{depth}, got {branch_point}")
    prefix = Trajectory(initial=winner.trajectory.initial,
                        steps=winner.trajectory.steps[:branch_point])
    induce_cfg = replace(cfg, verify=False,
                         extra_instruction=ERROR_INDUCTION_INSTRUCTION)
    last_answer = None
    for _ in range(retries):
        report = run_episode(prefix.initial, generator, None, toolbox, gateway,
                             induce_cfg, resume=prefix)
        if report.error is not None:
            raise InductionFailed(f"generator failed during induction: {report.error}")
        candidate = report.trajectory
        last_answer = candidate.final_answer
        if (candidate.final_answer or "").strip().casefold() != winner.label.strip().casefold():
            return candidate
    raise InductionFailed(
        f"generator kept answering correctly ({last_answer!r}) after {retries} attempts"
    )


def plan_branch_points(records: Sequence[TrajectoryRecord], seed: int) -> dict[str, int]:
    """Uniform branch point in 1..depth per record, fixed by the recorded seed."""
    rng = np.random.default_rng(seed)
    plan: dict[str, int] = {}
    for record in sorted(records, key=lambda r: r.record_id):
        plan[record.record_id] = int(rng.integers(1, record.trajectory.depth + 1))
    return plan


# -- stage 6: preference export ------------------------------------------------


def _image_inputs_ok(traj: Trajectory, store: ImageStore) -> bool:
    if not traj.initial.image_refs:
        return False
    refs = list(traj.initial.image_refs)
    refs.extend(s.observation.payload for s in traj.steps
                if s.observation is not None and s.observation.kind == "image")
    return all(ref in store for ref in refs)


def build_dpo(
    pairs: Sequence[tuple[TrajectoryRecord, Trajectory, int]],
    store: ImageStore,
) -> tuple[list[DpoRecord], list[DropEntry]]:
    """Assemble preference records, dropping pairs with missing images or broken prefixes."""
    out: list[DpoRecord] = []
    drops: list[DropEntry] = []
    for winner, loser, branch_point in pairs:
        if loser.steps[:branch_point] != winner.trajectory.steps[:branch_point]:
            drops.append(DropEntry(winner.record_id, "dpo", RULE_PREFIX_MISMATCH))
            continue
        if (loser.final_answer or "").strip().casefold() == winner.label.strip().casefold():
            drops.append(DropEntry(winner.record_id, "dpo", RULE_INDUCTION_FAILED))
            continue
        if not (_image_inputs_ok(winner.trajectory, store) and _image_inputs_ok(loser, store)):
            drops.append(DropEntry(winner.record_id, "dpo", RULE_EMPTY_IMAGE))
            continue
        doc = {
            "task_type": winner.task_type,
            "question": winner.question,
            "label": winner.label,
            "chosen": to_document(winner.trajectory),
            "rejected": to_document(loser),
            "branch_point": branch_point,
        }
        out.append(DpoRecord(
            record_id=content_id(doc), task_type=winner.task_type,
            question=winner.question, label=winner.label,
            chosen=winner.trajectory, rejected=loser, branch_point=branch_point,
            provenance=dict(winner.provenance),
        ))
    out.sort(key=lambda r: r.record_id)
    return out, drops


# -- stage 7: statistics ---------------------------------------------------------


def stats(shard_path: str | Path, ledger_path: str | Path | None = None) -> dict[str, Any]:
    """Deterministic summary of a shard: totals, task types, step histogram, drops."""
    shard_path = Path(shard_path)
    if not shard_path.exists():
        raise UnreadableDataset(f"{shard_path} does not exist")
    by_task: dict[str, int] = {}
    histogram: dict[str, int] = {}
    total = 0
    try:
        lines = shard_path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UnreadableDataset(str(exc)) from exc
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise UnreadableDataset(f"{shard_path}:{i + 1}: {exc}") from exc
        total += 1
        task = str(doc.get("task_type", "unknown"))
        by_task[task] = by_task.get(task, 0) + 1
        traj_doc = doc.get("trajectory") or doc.get("chosen") or {}
        steps = traj_doc.get("steps")
        depth = str(len(steps)) if isinstance(steps, list) else "unknown"
        histogram[depth] = histogram.get(depth, 0) + 1
    drops: dict[str, int] = {}
    if ledger_path is not None:
        for entry in read_ledger(ledger_path):
            drops[entry.rule] = drops.get(entry.rule, 0) + 1
    return {
        "schema": STATS_SCHEMA,
        "total": total,
        "by_task_type": dict(sorted(by_task.items())),
        "step_histogram": dict(sorted(histogram.items())),
        "drops_by_rule": dict(sorted(drops.items())),
    }


# -- shard and ledger io ---------------------------------------------------------


def record_to_doc(record: TrajectoryRecord) -> dict[str, Any]:
    return {
        "schema": RECORD_SCHEMA,
        "record_id": record.record_id,
        "task_type": record.task_type,
        "question": record.question,
        "label": record.label,
        "trajectory": to_document(record.trajectory),
        "provenance": record.provenance,
    }


def record_from_doc(doc: dict[str, Any]) -> TrajectoryRecord:
    return TrajectoryRecord(
        record_id=str(doc["record_id"]),
        task_type=str(doc.get("task_type", "unknown")),
        question=str(doc.get("question", "")),
        label=str(doc.get("label", "")),
        trajectory=from_document(doc["trajectory"]),
        provenance={str(k): str(v) for k, v in (doc.get("provenance") or {}).items()},
    )


def dpo_to_doc(record: DpoRecord) -> dict[str, Any]:
    return {
        "schema": DPO_SCHEMA,
        "record_id": record.record_id,
        "task_type": record.task_type,
        "question": record.question,
        "label": record.label,
        "chosen": to_document(record.chosen),
        "rejected": to_document(record.rejected),
        "branch_point": record.branch_point,
        "provenance": record.provenance,
    }


def dpo_from_doc(doc: dict[str, Any]) -> DpoRecord:
    return DpoRecord(
        record_id=str(doc["record_id"]),
        task_type=str(doc.get("task_type", "unknown")),
        question=str(doc.get("question", "")),
        label=str(doc.get("label", "")),
        chosen=from_document(doc["chosen"]),
        rejected=from_document(doc["rejected"]),
        branch_point=int(doc["branch_point"]),
        provenance={str(k): str(v) for k, v in (doc.get("provenance") or {}).items()},
    )


def write_shard(path: str | Path, docs: Iterable[dict[str, Any]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for doc in docs:
            handle.write(canonical_json(doc) + "\n")


def read_shard(path: str | Path) -> list[dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise UnreadableDataset(f"{path} does not exist")
    docs = []
    for i, line in enumerate(path.read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            docs.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise UnreadableDataset(f"{path}:{i + 1}: {exc}") from exc
    return docs


def write_ledger(path: str | Path, entries: Iterable[DropEntry]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["record_id", "stage", "rule"])
        for entry in sorted(entries, key=lambda e: (e.stage, e.rule, e.record_id)):
            writer.writerow([entry.record_id, entry.stage, entry.rule])


def read_ledger(path: str | Path) -> list[DropEntry]:
    path = Path(path)
    if not path.exists():
        raise UnreadableDataset(f"{path} does not exist")
    with path.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        return [DropEntry(row["record_id"], row["stage"], row["rule"]) for row in reader]
