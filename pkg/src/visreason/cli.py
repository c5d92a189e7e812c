"""Command-line surface: episodes, pipeline stages, and lab probes.

Configuration layers as file < environment < flags; every run writes a
manifest next to its outputs recording the command, config path, seed,
and endpoint map. All randomness flows from the single recorded seed, so
reruns under mock backends are byte-identical.

Exit codes: 0 success, 1 property failure, 2 configuration error,
3 endpoint/backend failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import lab, pipeline
from .engine import (
    EngineConfig,
    STOP_MAX_STEPS,
    STOP_REASONER_ANSWER,
    STOP_VERIFIER,
    VerifierPair,
    report_to_json,
    run_episode,
)
from .errors import VisreasonError
from .gateway import (
    JUDGE,
    REASONER,
    VERIFIER_REFERENCE,
    VERIFIER_TUNED,
    DecodeConfig,
    Gateway,
    GatewayError,
    ModelHandle,
    load_mock_models,
)
from .images import ImageStore, decode_png
from .toolbox import HttpToolBackend, MockToolBackend, ToolFailure, Toolbox
from .trajectory import EpisodeInitial
from .verifier import VerifierConfig, preference_prob

EXIT_OK = 0
EXIT_PROPERTY = 1
EXIT_CONFIG = 2
EXIT_ENDPOINT = 3

MANIFEST_SCHEMA = "run-manifest@1"

_ROLE_KEYS = {
    "reasoner": REASONER,
    "verifier_tuned": VERIFIER_TUNED,
    "verifier_reference": VERIFIER_REFERENCE,
    "judge": JUDGE,
}


class ConfigError(VisreasonError):
    pass


@dataclass
class Settings:
    config_path: str | None = None
    seed: int = 0
    jobs: int = 1
    epsilon: float = 0.5
    eta: float = 1.0
    q_convention: float = 0.0
    max_steps: int = 10
    action_context: str = "planning_only"
    system_prompt: str = ""
    mock: bool = False
    cache_dir: str | None = None
    image_store: str | None = None
    mock_models: str | None = None
    mock_tools: str | None = None
    tool_backend: str | None = None
    models: dict[str, dict[str, str]] = field(default_factory=dict)


_ENV_KEYS = {
    "VISREASON_SEED": ("seed", int),
    "VISREASON_JOBS": ("jobs", int),
    "VISREASON_CACHE_DIR": ("cache_dir", str),
    "VISREASON_IMAGE_STORE": ("image_store", str),
}

_FILE_KEYS = (
    "seed", "jobs", "epsilon", "eta", "q_convention", "max_steps", "action_context",
    "system_prompt", "mock", "cache_dir", "image_store", "mock_models", "mock_tools",
    "tool_backend",
)


def load_settings(args: argparse.Namespace) -> Settings:
    settings = Settings()
    config_path = getattr(args, "config", None)
    if config_path:
        settings.config_path = config_path
        try:
            doc = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"config: cannot read {config_path}: {exc}") from exc
        for key in _FILE_KEYS:
            if key in doc:
                setattr(settings, key, doc[key])
        settings.models = {str(k): dict(v) for k, v in doc.get("models", {}).items()}
        base = Path(config_path).parent
        for key in ("mock_models", "mock_tools", "image_store"):
            value = getattr(settings, key)
            if value and not Path(value).is_absolute():
                setattr(settings, key, str(base / value))
    for env, (key, cast) in _ENV_KEYS.items():
        if env in os.environ:
            try:
                setattr(settings, key, cast(os.environ[env]))
            except ValueError as exc:
                raise ConfigError(f"config: bad {env}: {exc}") from exc
    for key in ("seed", "jobs", "epsilon", "eta", "max_steps", "cache_dir", "mock"):
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None and value is not False:
            setattr(settings, key, value)
    if getattr(args, "image_store", None):
        settings.image_store = args.image_store
    return settings


@dataclass
class Runtime:
    settings: Settings
    gateway: Gateway
    toolbox: Toolbox
    handles: dict[str, ModelHandle]
    engine_cfg: EngineConfig

    def verifier_pair(self) -> VerifierPair:
        return VerifierPair(tuned=self.require(VERIFIER_TUNED), reference=self.require(VERIFIER_REFERENCE))

    def require(self, role_key: str) -> ModelHandle:
        handle = self.handles.get(role_key)
        if handle is None:
            raise ConfigError(f"config: no model configured for role {role_key!r}")
        return handle


def build_runtime(settings: Settings, need_models: bool = True) -> Runtime:
    try:
        verifier_cfg = VerifierConfig(eta=settings.eta, epsilon=settings.epsilon,
                                      q_convention=settings.q_convention)
        engine_cfg = EngineConfig(verifier=verifier_cfg, max_steps=settings.max_steps,
                                  decode=DecodeConfig(), action_context=settings.action_context)
    except ValueError as exc:
        raise ConfigError(f"config: {exc}") from exc

    mock_models = {}
    if settings.mock_models:
        try:
            mock_models = load_mock_models(settings.mock_models)
        except (OSError, VisreasonError) as exc:
            raise ConfigError(f"config: mock_models: {exc}") from exc
    gateway = Gateway(mock_models=mock_models, cache_dir=settings.cache_dir)

    store = ImageStore(settings.image_store)
    if settings.mock or settings.tool_backend is None:
        tool_spec: dict[str, Any] = {}
        if settings.mock_tools:
            try:
                tool_spec = json.loads(Path(settings.mock_tools).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"config: mock_tools: {exc}") from exc
        backend: Any = MockToolBackend(tool_spec)
    else:
        backend = HttpToolBackend(settings.tool_backend)
    toolbox = Toolbox(store=store, backend=backend)

    handles: dict[str, ModelHandle] = {}
    if need_models:
        for key, role in _ROLE_KEYS.items():
            spec = settings.models.get(key)
            if spec is None:
                if settings.mock:
                    handles[role] = ModelHandle(model_id=key, endpoint="mock", role=role)
                continue
            endpoint = "mock" if settings.mock else str(spec.get("endpoint", "mock"))
            handles[role] = ModelHandle(model_id=str(spec.get("model_id", key)),
                                        endpoint=endpoint, role=role)
    return Runtime(settings=settings, gateway=gateway, toolbox=toolbox,
                   handles=handles, engine_cfg=engine_cfg)


def write_manifest(out_dir: Path, command: list[str], settings: Settings,
                   inputs: list[str], outputs: list[str], runtime: Runtime | None) -> None:
    endpoints = {}
    if runtime is not None:
        endpoints = {h.role: h.endpoint for h in runtime.handles.values()}
    doc = {
        "schema": MANIFEST_SCHEMA,
        "command": command,
        "config": settings.config_path,
        "seed": settings.seed,
        "inputs": sorted(inputs),
        "outputs": sorted(outputs),
        "endpoints": dict(sorted(endpoints.items())),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(
        json.dumps(doc, sort_keys=True, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )


# -- run ----------------------------------------------------------------------


def cmd_run(args: argparse.Namespace, argv: list[str]) -> int:
    settings = load_settings(args)
    runtime = build_runtime(settings)
    image_path = Path(args.image)
    if not image_path.exists():
        print(f"error: image file not found: {image_path}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        ref = runtime.toolbox.store.put(decode_png(image_path.read_bytes()))
    except Exception as exc:
        print(f"error: cannot load image {image_path}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    initial = EpisodeInitial(question=args.question, image_refs=(ref,),
                             system_prompt=settings.system_prompt)
    try:
        report = run_episode(initial, runtime.require(REASONER), runtime.verifier_pair(),
                             runtime.toolbox, runtime.gateway, runtime.engine_cfg)
    except GatewayError as exc:
        print(f"error: endpoint failure: {exc}", file=sys.stderr)
        return EXIT_ENDPOINT
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.json"
    report_path.write_text(report_to_json(report), encoding="utf-8")
    write_manifest(out_dir, argv, settings, [str(image_path)], [str(report_path)], runtime)
    print(f"stop_reason={report.stop_reason} steps={report.trajectory.depth} -> {report_path}")
    if report.stop_reason in (STOP_VERIFIER, STOP_MAX_STEPS, STOP_REASONER_ANSWER):
        return EXIT_OK
    return EXIT_ENDPOINT


# -- pipeline -------------------------------------------------------------------

PIPELINE_STAGES = ("generate", "preprocess", "judge", "sft", "induce", "dpo", "stats")


def cmd_pipeline(args: argparse.Namespace, argv: list[str]) -> int:
    settings = load_settings(args)
    runtime = build_runtime(settings)
    out_path = Path(args.out)
    out_dir = out_path if out_path.suffix == "" else out_path.parent
    inputs: list[str] = []
    outputs: list[str] = [str(out_path)]

    stage = args.stage
    try:
        if stage == "generate":
            if not args.seeds:
                raise ConfigError("config: generate needs --seeds (a manifest directory)")
            inputs.append(args.seeds)
            seeds = pipeline.read_seed_manifest(args.seeds, runtime.toolbox.store)
            pair = runtime.verifier_pair() if args.gated else None
            cfg = runtime.engine_cfg if args.gated else _ungated(runtime.engine_cfg)
            raw, errors = pipeline.generate_trajectories(
                seeds, runtime.require(REASONER), runtime.toolbox, runtime.gateway,
                cfg, verifier_pair=pair, system_prompt=settings.system_prompt)
            pipeline.write_shard(out_path, raw)
            errors_path = out_path.with_suffix(".errors.jsonl")
            pipeline.write_shard(errors_path, errors)
            outputs.append(str(errors_path))
            print(f"generated {len(raw)} trajectories, {len(errors)} errors -> {out_path}")
        elif stage == "preprocess":
            inputs.append(args.input)
            raw_docs = pipeline.read_shard(args.input)
            cleaned, drops = pipeline.preprocess(raw_docs)
            pipeline.write_shard(out_path, (pipeline.record_to_doc(r) for r in cleaned))
            ledger_path = Path(args.ledger or out_path.with_suffix(".ledger.csv"))
            pipeline.write_ledger(ledger_path, drops)
            outputs.append(str(ledger_path))
            print(f"kept {len(cleaned)}, dropped {len(drops)} -> {out_path}")
        elif stage == "judge":
            inputs.append(args.input)
            records = [pipeline.record_from_doc(d) for d in pipeline.read_shard(args.input)]
            accepted, rejected, quarantined, drops = pipeline.judge_filter(
                records, runtime.require(JUDGE), runtime.gateway)
            pipeline.write_shard(out_path, (pipeline.record_to_doc(r) for r in accepted))
            quarantine_path = out_path.with_suffix(".quarantine.jsonl")
            pipeline.write_shard(quarantine_path, (pipeline.record_to_doc(r) for r in quarantined))
            ledger_path = Path(args.ledger or out_path.with_suffix(".ledger.csv"))
            pipeline.write_ledger(ledger_path, drops)
            outputs += [str(quarantine_path), str(ledger_path)]
            print(f"accepted {len(accepted)}, rejected {len(rejected)}, "
                  f"quarantined {len(quarantined)} -> {out_path}")
        elif stage == "sft":
            inputs.append(args.input)
            records = [pipeline.record_from_doc(d) for d in pipeline.read_shard(args.input)]
            sft = pipeline.build_sft(records)
            pipeline.write_shard(out_path, (pipeline.record_to_doc(r) for r in sft))
            print(f"exported {len(sft)} supervised records -> {out_path}")
        elif stage == "induce":
            inputs.append(args.input)
            records = [pipeline.record_from_doc(d) for d in pipeline.read_shard(args.input)]
            plan = pipeline.plan_branch_points(records, settings.seed)
            induced: list[dict[str, Any]] = []
            drops: list[pipeline.DropEntry] = []
            for record in records:
                branch = plan[record.record_id]
                try:
                    loser = pipeline.induce_error(record, runtime.require(REASONER),
                                                  runtime.toolbox, runtime.gateway,
                                                  branch, runtime.engine_cfg)
                except pipeline.InductionFailed:
                    drops.append(pipeline.DropEntry(record.record_id, "induce",
                                                    pipeline.RULE_INDUCTION_FAILED))
                    continue
                induced.append({
                    "schema": "induced-pair@1",
                    "winner": pipeline.record_to_doc(record),
                    "loser": pipeline.to_document(loser),
                    "branch_point": branch,
                })
            pipeline.write_shard(out_path, induced)
            ledger_path = Path(args.ledger or out_path.with_suffix(".ledger.csv"))
            pipeline.write_ledger(ledger_path, drops)
            outputs.append(str(ledger_path))
            print(f"induced {len(induced)} losers, {len(drops)} failures -> {out_path}")
        elif stage == "dpo":
            inputs.append(args.input)
            pairs = []
            for doc in pipeline.read_shard(args.input):
                winner = pipeline.record_from_doc(doc["winner"])
                loser = pipeline.from_document(doc["loser"])
                pairs.append((winner, loser, int(doc["branch_point"])))
            dpo_records, drops = pipeline.build_dpo(pairs, runtime.toolbox.store)
            pipeline.write_shard(out_path, (pipeline.dpo_to_doc(r) for r in dpo_records))
            ledger_path = Path(args.ledger or out_path.with_suffix(".ledger.csv"))
            pipeline.write_ledger(ledger_path, drops)
            outputs.append(str(ledger_path))
            print(f"built {len(dpo_records)} preference records, dropped {len(drops)} -> {out_path}")
        elif stage == "stats":
            inputs.append(args.input)
            summary = pipeline.stats(args.input, args.ledger)
            out_path.parent.mkdir(parents=True, exist_ok=True)
            out_path.write_text(json.dumps(summary, sort_keys=True, ensure_ascii=False, indent=2) + "\n",
                                encoding="utf-8")
            print(f"total={summary['total']} -> {out_path}")
        else:  # pragma: no cover - argparse restricts choices
            raise ConfigError(f"unknown stage {stage!r}")
    except pipeline.UnreadableDataset as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GatewayError as exc:
        print(f"error: endpoint failure: {exc}", file=sys.stderr)
        return EXIT_ENDPOINT
    except ToolFailure as exc:
        print(f"error: tool backend failure: {exc}", file=sys.stderr)
        return EXIT_ENDPOINT

    write_manifest(out_dir if out_dir != Path("") else Path("."), argv, settings,
                   inputs, outputs, runtime)
    return EXIT_OK


def _ungated(cfg: EngineConfig) -> EngineConfig:
    from dataclasses import replace

    return replace(cfg, verify=False)


# -- lab -------------------------------------------------------------------------

LAB_PROBES = ("sft-train", "dpo-train", "grad-check", "gibbs-check", "submartingale", "stopping-sim")


def cmd_lab(args: argparse.Namespace, argv: list[str]) -> int:
    settings = load_settings(args)
    runtime = build_runtime(settings, need_models=False)
    probe = args.probe
    seed = settings.seed
    report: dict[str, Any] = {"schema": "probe-report@1", "probe": probe, "seed": seed}

    if probe == "sft-train":
        policy, dataset = lab.sft_fixture(seed)
        cfg = lab.TrainConfig(learning_rate=0.5, iterations=200)
        _, trace = lab.train_sft(policy, dataset, cfg)
        decreasing = all(trace[i + 1] < trace[i] for i in range(10))
        halved = trace[-1] < 0.5 * trace[0]
        report["details"] = {"initial": trace[0], "final": trace[-1],
                             "iterations": cfg.iterations}
        report["passed"] = decreasing and halved
    elif probe == "dpo-train":
        phi0, pairs = lab.dpo_fixture(seed)
        cfg = lab.TrainConfig(learning_rate=0.2, eta=settings.eta, iterations=300)
        phi_hat, trace = lab.train_sdpo(phi0, pairs, cfg)
        prefs = [preference_prob(lab.toy_reward(phi_hat, phi0, p.winner, cfg.eta),
                                 lab.toy_reward(phi_hat, phi0, p.loser, cfg.eta))
                 for p in pairs]
        report["details"] = {"initial": trace[0], "final": trace[-1],
                             "min_preference": min(prefs)}
        report["passed"] = trace[-1] < trace[0] and all(p > 0.5 for p in prefs)
    elif probe == "grad-check":
        worst = 0.0
        rng = np.random.default_rng(seed)
        for _ in range(args.instances):
            worst = max(worst, _grad_check_once(rng))
        report["details"] = {"instances": args.instances, "max_rel_error": worst}
        report["passed"] = worst < 1e-5
    elif probe == "gibbs-check":
        worst_gap = 0.0
        rng = np.random.default_rng(seed)
        competitors = 1000
        for _ in range(50):
            size = int(rng.integers(2, 9))
            p0 = rng.dirichlet(np.full(size, 2.0))
            U = rng.uniform(-1.5, 1.5, size=size)
            eta = float(rng.uniform(0.5, 2.0))
            star = lab.gibbs_optimum(p0, U, eta)
            best = lab.kl_objective(star, p0, U, eta)
            for _ in range(competitors):
                q = rng.dirichlet(np.ones(size))
                worst_gap = max(worst_gap, best - lab.kl_objective(q, p0, U, eta))
        report["details"] = {"instances": 50, "competitors": competitors,
                             "max_optimum_excess": worst_gap}
        report["passed"] = worst_gap <= 1e-12
    elif probe == "submartingale":
        dominance_ok = True
        min_exact = float("inf")
        for i in range(20):
            chain = lab.dominance_instance(seed + i)
            for state in chain.states:
                value = lab.expected_step_ratio(chain, state)
                min_exact = min(min_exact, value)
                dominance_ok = dominance_ok and value >= 0
        violations_found = 0
        for i in range(5):
            chain = lab.violation_instance(seed + 1000 + i)
            if any(lab.expected_step_ratio(chain, s) < 0 for s in chain.states):
                violations_found += 1
        report["details"] = {"min_exact_expectation": min_exact,
                             "violations_found": violations_found}
        report["passed"] = dominance_ok and violations_found == 5
    elif probe == "stopping-sim":
        chain, eps = lab.stopping_instance(seed, eps=settings.epsilon)
        result = lab.stopping_time_sim(chain.tuned, chain.reference, chain.reasoner,
                                       eps=eps, episodes=args.episodes, cap=args.cap,
                                       seed=seed, states=chain.states,
                                       start_state=chain.start_state)
        report["details"] = {
            "episodes": result.episodes, "cap": result.cap, "eps": result.eps,
            "cap_hits": result.cap_hits, "mean_steps": result.mean_steps,
            "histogram": {str(k): v for k, v in sorted(result.histogram.items())},
            "kernel_backend": result.kernel_backend,
        }
        report["passed"] = result.cap_hits == 0
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError(f"unknown probe {probe!r}")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / f"{probe}.json"
    report_path.write_text(json.dumps(report, sort_keys=True, ensure_ascii=False, indent=2) + "\n",
                           encoding="utf-8")
    write_manifest(out_dir, argv, settings, [], [str(report_path)], None)
    print(f"{probe}: {'pass' if report['passed'] else 'FAIL'} -> {report_path}")
    return EXIT_OK if report["passed"] else EXIT_PROPERTY


def _grad_check_once(rng: np.random.Generator) -> float:
    sub_seed = int(rng.integers(0, 2**31 - 1))
    policy, dataset = lab.sft_fixture(sub_seed, n_trajectories=3)
    analytic = lab.sft_objective_gradient(policy, dataset)
    numeric = lab.finite_diff_gradient(lambda p: lab.sft_objective(p, dataset), policy, 1e-5)
    worst = lab.gradient_max_rel_error(analytic, numeric)
    phi0, pairs = lab.dpo_fixture(sub_seed, n_pairs=3)
    phi = lab.random_policy(tuple(phi0.contexts()), phi0.vocab,
                            np.random.default_rng(sub_seed + 1), scale=0.5)
    analytic = lab.sdpo_loss_gradient(phi, phi0, pairs, eta=1.0)
    numeric = lab.finite_diff_gradient(lambda p: lab.sdpo_loss(p, phi0, pairs, eta=1.0), phi, 1e-5)
    return max(worst, lab.gradient_max_rel_error(analytic, numeric))


# -- entry point --------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="root seed for all randomness")
    parser.add_argument("--jobs", type=int, default=None, help="global parallelism cap")
    parser.add_argument("--epsilon", type=float, default=None, help="stopping threshold (> 0)")
    parser.add_argument("--eta", type=float, default=None, help="reward scale (> 0)")
    parser.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    parser.add_argument("--mock", action="store_true", help="force mock model/tool backends")
    parser.add_argument("--cache-dir", dest="cache_dir", default=None)
    parser.add_argument("--image-store", dest="image_store", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="visreason",
                                     description="verifier-guided visual reasoning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one reasoning episode")
    run.add_argument("--question", required=True)
    run.add_argument("--image", required=True, help="path to the input image")
    run.add_argument("--out", required=True, help="output directory")
    _add_common(run)

    pipe = sub.add_parser("pipeline", help="run one dataset pipeline stage")
    pipe.add_argument("stage", choices=PIPELINE_STAGES)
    pipe.add_argument("--in", dest="input", help="input shard")
    pipe.add_argument("--out", required=True, help="output shard or report path")
    pipe.add_argument("--seeds", help="seed manifest directory (generate)")
    pipe.add_argument("--ledger", help="drop ledger path (defaults next to --out)")
    pipe.add_argument("--gated", action="store_true",
                      help="apply verifier gating during generation")
    _add_common(pipe)

    lab_cmd = sub.add_parser("lab", help="run a training-lab probe")
    lab_cmd.add_argument("probe", choices=LAB_PROBES)
    lab_cmd.add_argument("--out", required=True, help="output directory")
    lab_cmd.add_argument("--instances", type=int, default=100, help="grad-check instances")
    lab_cmd.add_argument("--episodes", type=int, default=10000, help="stopping-sim episodes")
    lab_cmd.add_argument("--cap", type=int, default=200, help="stopping-sim step cap")
    _add_common(lab_cmd)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args, argv)
        if args.command == "pipeline":
            return cmd_pipeline(args, argv)
        return cmd_lab(args, argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GatewayError as exc:
        print(f"error: endpoint failure: {exc}", file=sys.stderr)
        return EXIT_ENDPOINT


if __name__ == "__main__":
    sys.exit(main())
