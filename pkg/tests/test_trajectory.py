from __future__ import annotations

import json

import pytest
from hypothesis import given, strategies as st

from visreason.actions import ActionKind
from visreason.trajectory import (
    AlreadyFinalized,
    AppendToCompleted,
    COMPLETED,
    EpisodeInitial,
    IN_PROGRESS,
    Observation,
    ReasoningStep,
    SchemaViolation,
    TokenizerFailure,
    Trajectory,
    append_step,
    deserialize,
    finalize,
    new_trajectory,
    serialize,
    token_count,
    validate,
    whitespace_tokens,
)

INITIAL = EpisodeInitial(question="what color?", image_refs=("ref-1",), system_prompt="sys")


def text_step(planning: str = "look", payload: str = "something") -> ReasoningStep:
    return ReasoningStep(
        planning=planning,
        action=ActionKind.OCR,
        observation=Observation(kind="text", payload=payload, produced_by=ActionKind.OCR),
    )


def test_append_step_grows_by_one():
    traj = new_trajectory(INITIAL)
    traj = append_step(traj, text_step("first"))
    assert traj.depth == 1
    assert finalize(traj, "done").depth == 1


def test_append_preserves_order():
    traj = new_trajectory(INITIAL)
    for i in range(3):
        traj = append_step(traj, text_step(f"p{i}"))
    assert [s.planning for s in traj.steps] == ["p0", "p1", "p2"]


def test_append_to_completed_rejected():
    traj = finalize(new_trajectory(INITIAL), "answer")
    with pytest.raises(AppendToCompleted):
        append_step(traj, text_step())


def test_finalize_zero_steps_counts():
    traj = finalize(new_trajectory(INITIAL), "answer")
    assert traj.depth == 0
    assert traj.final_answer == "answer"
    assert traj.status == COMPLETED


def test_finalize_three_steps_counting_shape():
    traj = new_trajectory(INITIAL)
    for i in range(3):
        traj = append_step(traj, text_step(f"p{i}"))
    traj = finalize(traj, "final")
    # plannings = steps + final answer = 4, actions = observations = 3
    plannings = [s.planning for s in traj.steps] + [traj.final_answer]
    assert len(plannings) == 4
    assert sum(1 for s in traj.steps if s.observation is not None) == 3


def test_finalize_twice_rejected():
    traj = finalize(new_trajectory(INITIAL), "a")
    with pytest.raises(AlreadyFinalized):
        finalize(traj, "b")


def test_validate_clean_trajectory():
    traj = finalize(append_step(new_trajectory(INITIAL), text_step()), "x")
    assert validate(traj) == []


def test_validate_flags_missing_observation():
    broken = ReasoningStep(planning="p", action=ActionKind.CROP, observation=None)
    traj = Trajectory(initial=INITIAL, steps=(text_step(), broken, text_step()),
                      final_answer="x", status=COMPLETED)
    violations = validate(traj)
    assert [v.code for v in violations] == ["malformed_step"]
    assert violations[0].step_index == 1


def test_validate_flags_premature_answer():
    traj = Trajectory(initial=INITIAL, final_answer="early", status=IN_PROGRESS)
    assert "premature_answer" in [v.code for v in validate(traj)]


def test_token_count_empty():
    assert token_count(new_trajectory(INITIAL), whitespace_tokens) == 0


def test_token_count_sums_segments():
    # whitespace oracle: 5 + 1 (action name) + 7 + 1 + 8 words
    traj = new_trajectory(INITIAL)
    traj = append_step(traj, text_step("one two three four five", "a b c d e f g"))
    traj = append_step(traj, text_step("x " * 7, ""))
    expected = 5 + 1 + 7 + 7 + 1 + 0
    assert token_count(traj, whitespace_tokens) == expected


def test_token_count_image_cost_config():
    step = ReasoningStep(
        planning="p",
        action=ActionKind.CROP,
        observation=Observation(kind="image", payload="ref-2", produced_by=ActionKind.CROP),
    )
    traj = append_step(new_trajectory(INITIAL), step)
    assert token_count(traj, whitespace_tokens) == 2  # planning + action name
    assert token_count(traj, whitespace_tokens, per_image_cost=10) == 12


def test_token_count_tokenizer_failure():
    def broken(_: str) -> int:
        raise RuntimeError("boom")

    traj = append_step(new_trajectory(INITIAL), text_step())
    with pytest.raises(TokenizerFailure):
        token_count(traj, broken)


def test_round_trip_two_steps():
    traj = new_trajectory(INITIAL)
    traj = append_step(traj, text_step("first"))
    structured = ReasoningStep(
        planning="ground it",
        action=ActionKind.GROUNDING,
        observation=Observation(kind="structured", payload={"boxes": [[1, 2, 3, 4]]},
                                produced_by=ActionKind.GROUNDING),
    )
    traj = finalize(append_step(traj, structured), "done")
    assert deserialize(serialize(traj)) == traj


def test_deserialize_missing_final_answer_on_completed():
    traj = finalize(new_trajectory(INITIAL), "x")
    doc = json.loads(serialize(traj))
    del doc["final_answer"]
    with pytest.raises(SchemaViolation) as info:
        deserialize(json.dumps(doc).encode())
    assert "final_answer" in str(info.value)


def test_unknown_extra_field_preserved():
    traj = finalize(new_trajectory(INITIAL), "x")
    doc = json.loads(serialize(traj))
    doc["future_field"] = {"nested": [1, 2]}
    restored = deserialize(json.dumps(doc).encode())
    assert restored.extra == {"future_field": {"nested": [1, 2]}}
    assert json.loads(serialize(restored))["future_field"] == {"nested": [1, 2]}


def test_serialize_then_deserialize_is_identity_on_bytes():
    traj = finalize(append_step(new_trajectory(INITIAL), text_step()), "x")
    data = serialize(traj)
    assert serialize(deserialize(data)) == data


_texts = st.text(alphabet=st.characters(codec="utf-8", exclude_characters="\x00"), max_size=40)


@st.composite
def trajectories(draw) -> Trajectory:
    initial = EpisodeInitial(question=draw(_texts), image_refs=("r0",), system_prompt=draw(_texts))
    steps = []
    for _ in range(draw(st.integers(0, 4))):
        kind = draw(st.sampled_from(["text", "image", "structured"]))
        payload: object
        if kind == "text":
            payload = draw(_texts)
        elif kind == "image":
            payload = "ref-x"
        else:
            payload = {"k": draw(st.integers(0, 9))}
        action = draw(st.sampled_from(list(ActionKind)))
        steps.append(ReasoningStep(planning=draw(_texts.filter(bool)), action=action,
                                   observation=Observation(kind=kind, payload=payload,
                                                           produced_by=action)))
    traj = Trajectory(initial=initial, steps=tuple(steps))
    if draw(st.booleans()):
        traj = finalize(traj, draw(_texts))
    return traj


@given(trajectories())
def test_round_trip_property(traj: Trajectory):
    assert deserialize(serialize(traj)) == traj
