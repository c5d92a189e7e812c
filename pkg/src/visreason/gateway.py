"""Uniform access to generation, sequence scoring, and judging.

Remote models speak the OpenAI-compatible shape: chat completions for
generation and judging, completions with echo+logprobs for teacher-forced
sequence scoring. Mock models are table-driven and fully deterministic so
episodes and pipeline runs byte-compare across reruns. Responses from HTTP
endpoints are cached on disk keyed by request hash; every request carries
an idempotency key and is retried with exponential backoff.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import requests

from .errors import VisreasonError
from .trajectory import Trajectory

REASONER = "reasoner"
VERIFIER_REFERENCE = "verifier_reference"
VERIFIER_TUNED = "verifier_tuned"
JUDGE = "judge"

MOCK_ENDPOINT = "mock"
MOCK_SCHEMA = "mock-models@1"


class GatewayError(VisreasonError):
    pass


class EndpointError(GatewayError):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class Timeout(GatewayError):
    pass


class EmptyCompletion(GatewayError):
    pass


class ScoringUnsupported(GatewayError):
    pass


class TokenizationMismatch(GatewayError):
    pass


class UnparseableVerdict(GatewayError):
    pass


@dataclass(frozen=True)
class ModelHandle:
    model_id: str
    endpoint: str  # base URL, or "mock" for the in-process registry
    role: str = REASONER

    @property
    def is_mock(self) -> bool:
        return self.endpoint == MOCK_ENDPOINT


@dataclass(frozen=True)
class DecodeConfig:
    temperature: float = 0.0
    max_tokens: int = 512


@dataclass(frozen=True)
class JudgeResult:
    verdict: str  # correct | incorrect
    prompt_hash: str


class MockModel:
    """Deterministic scripted model.

    Spec keys: generate.by_context (ordered contains-matches), generate.script
    (consumed in call order), score.tokens (per-token logprob table),
    score.overrides (exact-continuation matches), judge.mode
    (equality | script | text).
    """

    def __init__(self, spec: dict[str, Any]):
        gen = spec.get("generate", {})
        self.by_context: list[dict[str, str]] = list(gen.get("by_context", ()))
        self.script: list[str] = list(gen.get("script", ()))
        self._cursor = 0
        score = spec.get("score", {})
        self.tokens: dict[str, float] = dict(score.get("tokens", {}))
        self.overrides: list[dict[str, Any]] = list(score.get("overrides", ()))
        self.judge_spec: dict[str, Any] = dict(spec.get("judge", {"mode": "equality"}))
        self._judge_cursor = 0
        self._lock = threading.Lock()

    def generate(self, context: str, decode: DecodeConfig) -> str:
        if decode.max_tokens <= 0:
            raise EmptyCompletion("max_tokens is 0")
        for entry in self.by_context:
            if entry["contains"] in context:
                return self._truncate(entry["text"], decode.max_tokens)
        with self._lock:
            if self._cursor < len(self.script):
                text = self.script[self._cursor]
                self._cursor += 1
                return self._truncate(text, decode.max_tokens)
        raise EndpointError(f"mock model has no completion for this context (script exhausted)")

    @staticmethod
    def _truncate(text: str, max_tokens: int) -> str:
        words = text.split(" ")
        if len(words) <= max_tokens:
            return text
        return " ".join(words[:max_tokens])

    def score(self, context: str, continuation: str) -> float:
        if continuation == "":
            return 0.0
        for entry in self.overrides:
            if entry["continuation"] != continuation:
                continue
            needle = entry.get("context_contains")
            if needle is not None and needle not in context:
                continue
            return float(entry["logprob"])
        total = 0.0
        for token in continuation.split():
            if token not in self.tokens:
                raise TokenizationMismatch(f"token {token!r} not in mock table")
            total += float(self.tokens[token])
        return total

    def judge_verdict(self, final_answer: str | None, label: str) -> str:
        mode = self.judge_spec.get("mode", "equality")
        if mode == "equality":
            got = (final_answer or "").strip().casefold()
            want = label.strip().casefold()
            return "correct" if got == want else "incorrect"
        if mode == "script":
            verdicts = self.judge_spec.get("verdicts", [])
            with self._lock:
                if self._judge_cursor >= len(verdicts):
                    raise EndpointError("mock judge script exhausted")
                verdict = verdicts[self._judge_cursor]
                self._judge_cursor += 1
            return str(verdict)
        if mode == "text":
            return str(self.judge_spec.get("text", ""))
        raise EndpointError(f"unknown mock judge mode {mode!r}")


def load_mock_models(path: str | Path) -> dict[str, MockModel]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("schema") != MOCK_SCHEMA:
        raise GatewayError(f"expected {MOCK_SCHEMA!r} fixture, got {doc.get('schema')!r}")
    return {name: MockModel(spec) for name, spec in doc.get("models", {}).items()}


def _request_hash(payload: dict[str, Any]) -> str:
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


_VERDICT_RE = re.compile(r"\b(correct|incorrect)\b", re.IGNORECASE)


def render_judge_prompt(traj: Trajectory, label: str) -> str:
    lines = [
        "You are grading a reasoning trajectory.",
        f"Question: {traj.initial.question}",
        f"Ground-truth label: {label}",
        f"Tool steps taken: {', '.join(s.action.value for s in traj.steps) or '(none)'}",
        f"Final answer: {traj.final_answer or '(missing)'}",
        "Reply with exactly one word: correct or incorrect.",
    ]
    return "\n".join(lines)


class Gateway:
    """Shared, thread-safe front door to every model the system talks to."""

    def __init__(
        self,
        mock_models: dict[str, MockModel] | None = None,
        cache_dir: str | Path | None = None,
        retries: int = 2,
        backoff: float = 0.25,
        timeout: float = 60.0,
        max_inflight: int = 4,
        auth_env: str = "VISREASON_API_TOKEN",
        sleep: Callable[[float], None] = time.sleep,
        session: requests.Session | None = None,
    ):
        self.mock_models = dict(mock_models or {})
        self.cache_dir = Path(cache_dir) if cache_dir else None
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self.auth_env = auth_env
        self._sleep = sleep
        self._session = session or requests.Session()
        self._limits: dict[str, threading.Semaphore] = {}
        self._limits_lock = threading.Lock()
        self._max_inflight = max_inflight

    # -- public operations ------------------------------------------------

    def generate(self, handle: ModelHandle, context: str, decode: DecodeConfig = DecodeConfig()) -> str:
        if handle.is_mock:
            text = self._mock(handle).generate(context, decode)
        else:
            body = {
                "model": handle.model_id,
                "messages": [{"role": "user", "content": context}],
                "temperature": decode.temperature,
                "max_tokens": decode.max_tokens,
            }
            doc = self._post(handle, "/chat/completions", body)
            try:
                text = doc["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError) as exc:
                raise EndpointError(f"malformed completion response: {exc}") from exc
        if not text:
            raise EmptyCompletion(f"model {handle.model_id} returned an empty completion")
        return text

    def score_sequence(self, handle: ModelHandle, context: str, continuation: str) -> float:
        """Sum of token log-probabilities of continuation given context (natural log)."""
        if handle.is_mock:
            return self._mock(handle).score(context, continuation)
        if continuation == "":
            return 0.0
        body = {
            "model": handle.model_id,
            "prompt": context + continuation,
            "max_tokens": 0,
            "echo": True,
            "logprobs": 0,
        }
        doc = self._post(handle, "/completions", body)
        try:
            lp = doc["choices"][0]["logprobs"]
            offsets = lp["text_offset"]
            token_logprobs = lp["token_logprobs"]
        except (KeyError, IndexError, TypeError):
            raise ScoringUnsupported(
                f"endpoint for {handle.model_id} did not echo token logprobs"
            ) from None
        boundary = len(context)
        if boundary not in offsets and any(o < boundary < o2 for o, o2 in zip(offsets, offsets[1:])):
            raise TokenizationMismatch("a token straddles the context/continuation boundary")
        total = 0.0
        for offset, logprob in zip(offsets, token_logprobs):
            if offset >= boundary:
                if logprob is None:
                    raise ScoringUnsupported("endpoint returned null logprobs in the echo region")
                total += float(logprob)
        return total

    def judge(self, handle: ModelHandle, traj: Trajectory, label: str) -> JudgeResult:
        if handle.role != JUDGE:
            raise GatewayError(f"handle {handle.model_id} has role {handle.role!r}, judge required")
        prompt = render_judge_prompt(traj, label)
        prompt_hash = hashlib.sha256(prompt.encode("utf-8")).hexdigest()
        if handle.is_mock:
            text = self._mock(handle).judge_verdict(traj.final_answer, label)
        else:
            body = {
                "model": handle.model_id,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": 0.0,
                "max_tokens": 8,
            }
            doc = self._post(handle, "/chat/completions", body)
            try:
                text = doc["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError) as exc:
                raise EndpointError(f"malformed judge response: {exc}") from exc
        match = _VERDICT_RE.search(text)
        if match is None:
            raise UnparseableVerdict(f"no verdict token in judge reply {text!r}")
        return JudgeResult(verdict=match.group(1).lower(), prompt_hash=prompt_hash)

    # -- internals ---------------------------------------------------------

    def _mock(self, handle: ModelHandle) -> MockModel:
        model = self.mock_models.get(handle.model_id)
        if model is None:
            raise EndpointError(f"no mock model registered for {handle.model_id!r}")
        return model

    def _limit(self, endpoint: str) -> threading.Semaphore:
        with self._limits_lock:
            sem = self._limits.get(endpoint)
            if sem is None:
                sem = self._limits[endpoint] = threading.Semaphore(self._max_inflight)
            return sem

    def _post(self, handle: ModelHandle, path: str, body: dict[str, Any]) -> dict[str, Any]:
        url = handle.endpoint.rstrip("/") + path
        key = _request_hash({"url": url, "body": body})
        cached = self._cache_read(key)
        if cached is not None:
            return cached
        headers = {"Idempotency-Key": key}
        token = os.environ.get(self.auth_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        last_error: Exception | None = None
        with self._limit(handle.endpoint):
            for attempt in range(self.retries + 1):
                try:
                    resp = self._session.post(url, json=body, headers=headers, timeout=self.timeout)
                except requests.Timeout as exc:
                    last_error = Timeout(f"{url}: {exc}")
                except requests.RequestException as exc:
                    last_error = EndpointError(f"{url}: {exc}")
                else:
                    if resp.status_code == 200:
                        doc = resp.json()
                        self._cache_write(key, doc)
                        return doc
                    last_error = EndpointError(f"{url} returned HTTP {resp.status_code}",
                                               status=resp.status_code)
                    if resp.status_code < 500:
                        break
                if attempt < self.retries:
                    self._sleep(self.backoff * 2 ** attempt)
        if isinstance(last_error, GatewayError):
            raise last_error
        raise EndpointError(f"{url}: {last_error}")

    def _cache_read(self, key: str) -> dict[str, Any] | None:
        if self.cache_dir is None:
            return None
        path = self.cache_dir / f"{key}.json"
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def _cache_write(self, key: str, doc: dict[str, Any]) -> None:
        if self.cache_dir is None:
            return
        path = self.cache_dir / f"{key}.json"
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(doc, sort_keys=True, ensure_ascii=False), encoding="utf-8")
        tmp.replace(path)
