"""The tool layer: directive parsing, argument schemas, and execution.

Crop, zoom, and overlay run in-process on the image store; the remaining
seven actions dispatch to a ToolBackend (an HTTP service in production, a
deterministic mock in tests). The planning text must carry exactly one
fenced block:

    ```action
    crop image=<ref> x=0 y=0 w=50 h=50
    ```

or, to finish the episode,

    ```answer
    final answer text
    ```

Argument schemas per action are artifact conventions (the tool set itself
is fixed, its I/O is not):

    grounding            image, target            -> structured {boxes, target}
    depth                image                    -> image
    zoom_in              image, x, y, w, h, factor-> image
    visual_search        image, query             -> structured {matches}
    crop                 image, x, y, w, h        -> image
    ocr                  image                    -> text
    image_segment        image                    -> image
    image_captioner      image                    -> text
    similarity_computing image_a, image_b         -> structured {score}
    overlay              base, layer, dx, dy, alpha -> image
"""

from __future__ import annotations

import base64
import hashlib
import json
import re
import shlex
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol

import numpy as np
import requests

from . import raster
from .actions import ActionKind, NATIVE_ACTIONS, list_actions
from .errors import VisreasonError
from .images import ImageStore, decode_png, encode_png
from .trajectory import OBS_IMAGE, OBS_STRUCTURED, OBS_TEXT, Observation


class ToolFailure(VisreasonError):
    pass


class DirectiveParseError(ToolFailure):
    pass


class InvalidArguments(ToolFailure):
    pass


class BackendUnavailable(ToolFailure):
    pass


# (name, type) pairs; type is one of ref | int | float | str
ARG_SCHEMAS: dict[ActionKind, tuple[tuple[str, str], ...]] = {
    ActionKind.GROUNDING: (("image", "ref"), ("target", "str")),
    ActionKind.DEPTH: (("image", "ref"),),
    ActionKind.ZOOM_IN: (("image", "ref"), ("x", "int"), ("y", "int"), ("w", "int"), ("h", "int"), ("factor", "float")),
    ActionKind.VISUAL_SEARCH: (("image", "ref"), ("query", "str")),
    ActionKind.CROP: (("image", "ref"), ("x", "int"), ("y", "int"), ("w", "int"), ("h", "int")),
    ActionKind.OCR: (("image", "ref"),),
    ActionKind.IMAGE_SEGMENT: (("image", "ref"),),
    ActionKind.IMAGE_CAPTIONER: (("image", "ref"),),
    ActionKind.SIMILARITY_COMPUTING: (("image_a", "ref"), ("image_b", "ref")),
    ActionKind.OVERLAY: (("base", "ref"), ("layer", "ref"), ("dx", "int"), ("dy", "int"), ("alpha", "float")),
}


@dataclass(frozen=True)
class ToolInvocation:
    action: ActionKind
    arguments: dict[str, Any]


@dataclass(frozen=True)
class ParsedPlanning:
    """Outcome of parsing a planning text: a tool invocation or a final answer."""

    invocation: ToolInvocation | None = None
    answer: str | None = None

    @property
    def is_answer(self) -> bool:
        return self.answer is not None


_BLOCK_RE = re.compile(r"```(action|answer)\n(.*?)```", re.DOTALL)


def format_directive(action: ActionKind, arguments: dict[str, Any]) -> str:
    parts = [action.value]
    for key, value in arguments.items():
        text = str(value)
        if isinstance(value, str) and (" " in value or not value):
            text = '"' + value.replace('"', '\\"') + '"'
        parts.append(f"{key}={text}")
    return "```action\n" + " ".join(parts) + "\n```"


def format_answer(text: str) -> str:
    return "```answer\n" + text + "\n```"


def parse_planning(text: str) -> ParsedPlanning:
    """Extract the single directive block from a planning text (strict)."""
    blocks = _BLOCK_RE.findall(text)
    if len(blocks) != 1:
        raise DirectiveParseError(
            f"expected exactly one fenced action/answer block, found {len(blocks)}"
        )
    kind, body = blocks[0]
    body = body.strip("\n")
    if kind == "answer":
        return ParsedPlanning(answer=body.strip())
    try:
        tokens = shlex.split(body)
    except ValueError as exc:
        raise DirectiveParseError(f"unbalanced quoting in directive: {exc}") from exc
    if not tokens:
        raise DirectiveParseError("empty action directive")
    try:
        action = ActionKind(tokens[0])
    except ValueError:
        raise DirectiveParseError(f"unknown action name {tokens[0]!r}") from None
    args: dict[str, Any] = {}
    for tok in tokens[1:]:
        if "=" not in tok:
            raise DirectiveParseError(f"argument {tok!r} is not key=value")
        key, raw = tok.split("=", 1)
        args[key] = _parse_value(raw)
    return ParsedPlanning(invocation=ToolInvocation(action=action, arguments=args))


def _parse_value(raw: str) -> Any:
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def validate_invocation(inv: ToolInvocation, store: ImageStore) -> None:
    """Check argument names, types, bounds, and image refs; raises InvalidArguments."""
    schema = ARG_SCHEMAS[inv.action]
    expected = {name for name, _ in schema}
    given = set(inv.arguments)
    if given != expected:
        missing = sorted(expected - given)
        unknown = sorted(given - expected)
        raise InvalidArguments(
            f"{inv.action.value}: missing {missing or 'nothing'}, unknown {unknown or 'nothing'}"
        )
    for name, kind in schema:
        value = inv.arguments[name]
        if kind == "int" and not isinstance(value, int):
            raise InvalidArguments(f"{inv.action.value}: {name} must be an integer, got {value!r}")
        if kind == "float" and not isinstance(value, (int, float)):
            raise InvalidArguments(f"{inv.action.value}: {name} must be numeric, got {value!r}")
        if kind in ("str", "ref") and not isinstance(value, str):
            raise InvalidArguments(f"{inv.action.value}: {name} must be a string, got {value!r}")
        if kind == "ref" and value not in store:
            raise InvalidArguments(f"{inv.action.value}: image ref {value!r} not in store")
    if inv.action is ActionKind.OVERLAY and not 0.0 <= float(inv.arguments["alpha"]) <= 1.0:
        raise InvalidArguments(f"overlay: alpha must lie in [0, 1], got {inv.arguments['alpha']}")
    if inv.action is ActionKind.ZOOM_IN and float(inv.arguments["factor"]) < 1.0:
        raise InvalidArguments(f"zoom_in: factor must be >= 1, got {inv.arguments['factor']}")


class ToolBackend(Protocol):
    """Executes non-native actions; must be deterministic for fixed inputs."""

    def run(self, action: ActionKind, arguments: dict[str, Any], images: dict[str, bytes]) -> tuple[str, Any]:
        """Return (observation kind, payload); image payloads are PNG bytes."""
        ...


def _digest(action: ActionKind, arguments: dict[str, Any], images: dict[str, bytes]) -> str:
    h = hashlib.sha256()
    h.update(action.value.encode())
    h.update(json.dumps(arguments, sort_keys=True, ensure_ascii=False).encode())
    for ref in sorted(images):
        h.update(ref.encode())
    return h.hexdigest()


def _synthetic_image(digest: str) -> bytes:
    rgba = np.frombuffer(bytes.fromhex(digest), dtype=np.uint8)[:4].copy()
    rgba[3] = 255
    img = np.empty((16, 16, 4), dtype=np.uint8)
    img[:, :] = rgba
    return encode_png(img)


class MockToolBackend:
    """Fixture-table backend: explicit entries first, then synthesized defaults.

    Table format:
      {"schema": "mock-tools@1",
       "entries": [{"action": "ocr", "match": {"image": "<ref>"},
                    "response": {"kind": "text", "payload": "STOP"}}],
       "synthesize_defaults": true}

    Image payloads in fixture entries are written as
    {"fill": [r, g, b, a], "width": w, "height": h}.
    """

    def __init__(self, spec: dict[str, Any] | None = None):
        spec = spec or {}
        self.entries: list[dict[str, Any]] = list(spec.get("entries", ()))
        self.synthesize_defaults: bool = bool(spec.get("synthesize_defaults", True))

    def run(self, action: ActionKind, arguments: dict[str, Any], images: dict[str, bytes]) -> tuple[str, Any]:
        for entry in self.entries:
            if entry.get("action") != action.value:
                continue
            match = entry.get("match", {})
            if all(arguments.get(k) == v for k, v in match.items()):
                response = entry["response"]
                kind, payload = response["kind"], response["payload"]
                if kind == OBS_IMAGE:
                    fill = tuple(payload["fill"])
                    img = np.empty((payload["height"], payload["width"], 4), dtype=np.uint8)
                    img[:, :] = fill
                    return kind, encode_png(img)
                return kind, payload
        if not self.synthesize_defaults:
            raise BackendUnavailable(f"no mock entry for {action.value} with {arguments}")
        return self._default(action, arguments, images)

    def _default(self, action: ActionKind, arguments: dict[str, Any], images: dict[str, bytes]) -> tuple[str, Any]:
        digest = _digest(action, arguments, images)
        short = digest[:8]
        frac = int(digest[:8], 16) / 0xFFFFFFFF
        box = [int(digest[i:i + 2], 16) % 64 for i in (8, 10, 12, 14)]
        box[2] += 1
        box[3] += 1
        if action is ActionKind.GROUNDING:
            return OBS_STRUCTURED, {"boxes": [box], "target": arguments["target"]}
        if action is ActionKind.VISUAL_SEARCH:
            return OBS_STRUCTURED, {"matches": [{"box": box, "score": round(frac, 6)}]}
        if action is ActionKind.SIMILARITY_COMPUTING:
            return OBS_STRUCTURED, {"score": round(frac, 6)}
        if action is ActionKind.OCR:
            return OBS_TEXT, f"TEXT-{short}"
        if action is ActionKind.IMAGE_CAPTIONER:
            return OBS_TEXT, f"caption {short}"
        if action in (ActionKind.DEPTH, ActionKind.IMAGE_SEGMENT):
            return OBS_IMAGE, _synthetic_image(digest)
        raise BackendUnavailable(f"no default response for native action {action.value}")


class HttpToolBackend:
    """Speaks the wire contract: POST {base}/execute with JSON
    {action, arguments, images: {ref: png base64}} and expects
    {kind, payload} back (image payloads under payload.png_b64).
    """

    def __init__(self, base_url: str, timeout: float = 30.0, retries: int = 2,
                 sleep: Callable[[float], None] = time.sleep,
                 session: requests.Session | None = None):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self._sleep = sleep
        self._session = session or requests.Session()

    def run(self, action: ActionKind, arguments: dict[str, Any], images: dict[str, bytes]) -> tuple[str, Any]:
        body = {
            "action": action.value,
            "arguments": arguments,
            "images": {ref: base64.b64encode(data).decode("ascii") for ref, data in images.items()},
        }
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._session.post(f"{self.base_url}/execute", json=body, timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = exc
            else:
                if resp.status_code == 200:
                    doc = resp.json()
                    kind = doc["kind"]
                    payload = doc["payload"]
                    if kind == OBS_IMAGE:
                        payload = base64.b64decode(payload["png_b64"])
                    return kind, payload
                last_error = BackendUnavailable(f"tool backend returned HTTP {resp.status_code}")
                if resp.status_code < 500:
                    break
            if attempt < self.retries:
                self._sleep(0.1 * 2 ** attempt)
        raise BackendUnavailable(f"{action.value}: {last_error}")


@dataclass
class Toolbox:
    """Everything the engine needs to turn an invocation into an observation."""

    store: ImageStore
    backend: ToolBackend = field(default_factory=MockToolBackend)

    def execute(self, inv: ToolInvocation) -> Observation:
        return execute(inv, self.store, self.backend)


def execute(inv: ToolInvocation, store: ImageStore, backend: ToolBackend) -> Observation:
    """Run one invocation; deterministic for a fixed backend, new images land in the store."""
    validate_invocation(inv, store)
    if inv.action in NATIVE_ACTIONS:
        result = _execute_native(inv, store)
        return Observation(kind=OBS_IMAGE, payload=store.put(result), produced_by=inv.action)
    refs = [v for (name, kind) in ARG_SCHEMAS[inv.action] if kind == "ref" for v in [inv.arguments[name]]]
    images = {ref: encode_png(store.get(ref)) for ref in refs}
    kind, payload = backend.run(inv.action, inv.arguments, images)
    if kind == OBS_IMAGE:
        payload = store.put(decode_png(payload))
    elif kind == OBS_TEXT:
        payload = str(payload)
    elif kind != OBS_STRUCTURED:
        raise BackendUnavailable(f"backend returned unknown observation kind {kind!r}")
    return Observation(kind=kind, payload=payload, produced_by=inv.action)


def _execute_native(inv: ToolInvocation, store: ImageStore) -> np.ndarray:
    args = inv.arguments
    if inv.action is ActionKind.CROP:
        rect = raster.Rect(args["x"], args["y"], args["w"], args["h"])
        return raster.crop(store.get(args["image"]), rect)
    if inv.action is ActionKind.ZOOM_IN:
        rect = raster.Rect(args["x"], args["y"], args["w"], args["h"])
        return raster.zoom_in(store.get(args["image"]), rect, float(args["factor"]))
    rect_base = store.get(args["base"])
    layer = store.get(args["layer"])
    return raster.overlay(rect_base, layer, (args["dx"], args["dy"]), float(args["alpha"]))


__all__ = [
    "ARG_SCHEMAS",
    "BackendUnavailable",
    "DirectiveParseError",
    "HttpToolBackend",
    "InvalidArguments",
    "MockToolBackend",
    "ParsedPlanning",
    "ToolBackend",
    "ToolFailure",
    "ToolInvocation",
    "Toolbox",
    "execute",
    "format_answer",
    "format_directive",
    "list_actions",
    "parse_planning",
    "validate_invocation",
]
