"""On-disk form of toy instances: policies, trajectories, preference pairs.

Schema (toy-instance@1): vocabulary, policy logit tables by name,
trajectories as [context, symbol] pair lists, and preference pairs as
winner/loser indices into the trajectory list.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import VisreasonError
from .policy import PreferencePair, ToyPolicy, ToyTrajectory

INSTANCE_SCHEMA = "toy-instance@1"


class BadInstanceFile(VisreasonError):
    pass


@dataclass
class ToyInstance:
    vocab: tuple[str, ...]
    policies: dict[str, ToyPolicy] = field(default_factory=dict)
    trajectories: list[ToyTrajectory] = field(default_factory=list)
    pairs: list[PreferencePair] = field(default_factory=list)


def save_instance(instance: ToyInstance, path: str | Path) -> None:
    traj_index = {id(t): i for i, t in enumerate(instance.trajectories)}
    doc = {
        "schema": INSTANCE_SCHEMA,
        "vocabulary": list(instance.vocab),
        "policies": {
            name: {ctx: [float(x) for x in row] for ctx, row in sorted(policy.logits.items())}
            for name, policy in sorted(instance.policies.items())
        },
        "trajectories": [
            {
                "plannings": [[c, s] for c, s in t.plannings],
                "actions": [[c, s] for c, s in t.actions],
            }
            for t in instance.trajectories
        ],
        "preference_pairs": [
            {"winner": traj_index[id(p.winner)], "loser": traj_index[id(p.loser)]}
            for p in instance.pairs
        ],
    }
    Path(path).write_text(
        json.dumps(doc, sort_keys=True, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )


def load_instance(path: str | Path) -> ToyInstance:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BadInstanceFile(f"{path}: not JSON: {exc}") from exc
    if doc.get("schema") != INSTANCE_SCHEMA:
        raise BadInstanceFile(f"{path}: expected schema {INSTANCE_SCHEMA!r}, got {doc.get('schema')!r}")
    vocab = tuple(doc["vocabulary"])
    policies = {
        name: ToyPolicy(vocab, {ctx: row for ctx, row in table.items()})
        for name, table in doc.get("policies", {}).items()
    }
    trajectories = [
        ToyTrajectory(
            plannings=tuple((c, s) for c, s in t["plannings"]),
            actions=tuple((c, s) for c, s in t["actions"]),
        )
        for t in doc.get("trajectories", [])
    ]
    pairs = []
    for p in doc.get("preference_pairs", []):
        try:
            pairs.append(PreferencePair(winner=trajectories[p["winner"]],
                                        loser=trajectories[p["loser"]]))
        except IndexError as exc:
            raise BadInstanceFile(f"{path}: preference pair references a missing trajectory") from exc
    return ToyInstance(vocab=vocab, policies=policies, trajectories=trajectories, pairs=pairs)
