"""Chat backends, validated completion calls with retries, and output parsers.

A completion is retried until its validator accepts the response or the
retry budget is exhausted, in which case FormatFailure is raised and the
plan is inexecutable downstream. Transport retries are a separate,
network-level budget.
"""

from __future__ import annotations

import json
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import requests

from .grounding import normalize

Message = dict[str, str]


class GatewayError(Exception):
    pass


class TransportError(GatewayError):
    """One failed network exchange; retried up to the transport budget."""


class BackendUnavailable(GatewayError):
    """Transport kept failing after the transport-retry budget."""


class FormatFailure(GatewayError):
    """Every validation attempt failed; carries the last raw output."""

    def __init__(self, last_raw: str, attempts: int):
        super().__init__(f"no valid response after {attempts} attempts")
        self.last_raw = last_raw
        self.attempts = attempts


class ResponseParseError(ValueError):
    """A validator rejected one response (consumes one retry)."""


def _nonempty(text: str) -> str:
    if not text.strip():
        raise ResponseParseError("empty response")
    return text


@dataclass
class ChatRequest:
    instruction: str
    user_content: str
    temperature: float = 1.0
    max_retries: int = 5
    validator: Callable[[str], Any] = _nonempty

    def __post_init__(self) -> None:
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class CompletionResult:
    text: str
    parsed: Any
    attempts: int
    attempt_texts: tuple[str, ...]


def render_request(backend, instruction: str, user_content: str) -> list[Message]:
    """Wire messages: a system turn when supported, otherwise an instruction prefix."""
    if not instruction:
        return [{"role": "user", "content": user_content}]
    if backend.supports_system_role:
        return [
            {"role": "system", "content": instruction},
            {"role": "user", "content": user_content},
        ]
    return [{"role": "user", "content": f"{instruction}\n\n{user_content}"}]


def complete(
    backend,
    request: ChatRequest,
    *,
    limiter: threading.Semaphore | None = None,
    transport_retries: int = 3,
    backoff_s: float = 0.05,
    sleep: Callable[[float], None] = time.sleep,
) -> CompletionResult:
    """First response passing the validator, with the attempt count.

    Each failed validation consumes one retry; transport failures are
    retried on their own budget and raise BackendUnavailable when it runs
    out.
    """
    messages = render_request(backend, request.instruction, request.user_content)
    attempt_texts: list[str] = []
    for attempt in range(1, request.max_retries + 1):
        text = _send(backend, messages, request.temperature, limiter, transport_retries, backoff_s, sleep)
        attempt_texts.append(text)
        try:
            parsed = request.validator(text)
        except ResponseParseError:
            continue
        return CompletionResult(text, parsed, attempt, tuple(attempt_texts))
    raise FormatFailure(last_raw=attempt_texts[-1], attempts=len(attempt_texts))


def _send(backend, messages, temperature, limiter, transport_retries, backoff_s, sleep) -> str:
    last: TransportError | None = None
    for attempt in range(max(1, transport_retries)):
        try:
            if limiter is not None:
                with limiter:
                    return backend.send(messages, temperature)
            return backend.send(messages, temperature)
        except TransportError as exc:
            last = exc
            if attempt + 1 < max(1, transport_retries):
                sleep(backoff_s * (2**attempt))
    raise BackendUnavailable(f"backend {backend.id} unreachable: {last}")


@dataclass
class ScriptRule:
    """First-match scripted response; a response list is consumed in order, last repeats."""

    responses: list[str]
    contains: str | None = None
    regex: str | None = None
    _used: int = field(default=0, repr=False, compare=False)

    def matches(self, text: str) -> bool:
        if self.contains is not None and self.contains in text:
            return True
        if self.regex is not None and re.search(self.regex, text):
            return True
        return False

    def next_response(self) -> str:
        idx = min(self._used, len(self.responses) - 1)
        self._used += 1
        return self.responses[idx]


class ScriptedBackend:
    """Deterministic test double: replaying the same call sequence yields the same responses."""

    def __init__(
        self,
        rules: Sequence[ScriptRule] = (),
        fallback: str = "",
        id: str = "scripted",
        supports_system_role: bool = True,
    ):
        self.id = id
        self.supports_system_role = supports_system_role
        self.rules = list(rules)
        self.fallback = fallback
        self.calls = 0
        self._lock = threading.Lock()

    @classmethod
    def from_dict(cls, spec: dict, **kwargs) -> "ScriptedBackend":
        rules = []
        for raw in spec.get("rules", []):
            responses = raw["responses"]
            if isinstance(responses, str):
                responses = [responses]
            rules.append(
                ScriptRule(
                    responses=list(responses),
                    contains=raw.get("contains"),
                    regex=raw.get("regex"),
                )
            )
        return cls(rules=rules, fallback=spec.get("fallback", ""), **kwargs)

    @classmethod
    def from_file(cls, path: str | Path, **kwargs) -> "ScriptedBackend":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")), **kwargs)

    def send(self, messages: Sequence[Message], temperature: float) -> str:
        text = "\n\n".join(m["content"] for m in messages)
        with self._lock:
            self.calls += 1
            for rule in self.rules:
                if rule.matches(text):
                    return rule.next_response()
            return self.fallback


class CallableBackend:
    """Backend driven by a plain function over the wire messages (test plumbing)."""

    def __init__(self, fn: Callable[[Sequence[Message]], str], id: str = "callable", supports_system_role: bool = True):
        self.id = id
        self.supports_system_role = supports_system_role
        self.fn = fn
        self.calls = 0
        self._lock = threading.Lock()

    def send(self, messages: Sequence[Message], temperature: float) -> str:
        with self._lock:
            self.calls += 1
        return self.fn(messages)


class HttpChatBackend:
    """Client for a chat-completions endpoint taking {model, messages, temperature}."""

    def __init__(
        self,
        url: str,
        model: str,
        api_key: str | None = None,
        id: str | None = None,
        supports_system_role: bool = True,
        timeout: float = 120.0,
        session: requests.Session | None = None,
    ):
        self.url = url
        self.model = model
        self.id = id or f"http:{model}"
        self.supports_system_role = supports_system_role
        self._headers = {"Content-Type": "application/json"}
        if api_key:
            self._headers["Authorization"] = f"Bearer {api_key}"
        self._timeout = timeout
        self._session = session or requests.Session()

    def check(self) -> None:
        """Cheap reachability probe; 4xx still proves the host answers."""
        try:
            self._session.head(self.url, timeout=min(self._timeout, 10.0))
        except requests.RequestException as exc:
            raise BackendUnavailable(f"backend {self.id} unreachable: {exc}") from exc

    def send(self, messages: Sequence[Message], temperature: float) -> str:
        payload = {"model": self.model, "messages": list(messages), "temperature": temperature}
        try:
            resp = self._session.post(
                self.url, json=payload, headers=self._headers, timeout=self._timeout
            )
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise TransportError(f"malformed chat response: {exc}") from exc


_NUMBERED = re.compile(r"^\s*\d+[.)]\s*(\S.*)$")
_BULLET = re.compile(r"^\s*[-*]\s+(\S.*)$")
_LONE_INDEX = re.compile(r"^[\[(]?(\d+)[\])]?\.?$")


def _strip_marker(line: str) -> str | None:
    m = _NUMBERED.match(line) or _BULLET.match(line)
    return m.group(1).strip() if m else None


def parse_plan(text: str) -> list[str]:
    """Step list from numbered or bulleted lines; prose lines are ignored."""
    steps = []
    for line in text.splitlines():
        step = _strip_marker(line)
        if step:
            steps.append(step)
    if not steps:
        raise ResponseParseError("no plan steps found")
    return steps


def _is_token(text: str, token: str) -> bool:
    stripped = text.strip().casefold()
    if stripped.endswith("."):
        stripped = stripped[:-1]
    return stripped == token


def parse_proposal(text: str) -> str | None:
    """A single proposed step, or None for the explicit stop token."""
    if _is_token(text, "none"):
        return None
    try:
        return parse_plan(text)[0]
    except ResponseParseError:
        pass
    for line in text.splitlines():
        if line.strip():
            return line.strip()
    raise ResponseParseError("empty proposal")


@dataclass(frozen=True)
class Choice:
    kind: str  # "selected" | "none" | "refusal"
    index: int | None = None

    @staticmethod
    def selected(index: int) -> "Choice":
        return Choice("selected", index)


CHOICE_NONE = Choice("none")
CHOICE_REFUSAL = Choice("refusal")


def tools_choice_key(text: str) -> str:
    """Normalization for tools candidates: match on the API name part."""
    key = normalize(text)
    if " description:" in key:
        key = key.split(" description:", 1)[0].strip()
    return key


def parse_choice(
    text: str,
    candidates: Sequence[str],
    *,
    key: Callable[[str], str] = normalize,
) -> Choice:
    """Resolve a selection response to one candidate, the stop token, or a refusal.

    Accepts a lone 1-based index or exactly one candidate appearing
    verbatim (under the normalization key); two matches are ambiguous and
    count as a parse failure.
    """
    if not candidates:
        raise ValueError("candidates must be non-empty")
    stripped = text.strip()
    if _is_token(stripped, "none"):
        return CHOICE_NONE
    if _is_token(stripped, "refuse"):
        return CHOICE_REFUSAL
    m = _LONE_INDEX.match(stripped)
    if m:
        idx = int(m.group(1)) - 1
        if not 0 <= idx < len(candidates):
            raise ResponseParseError(f"index {m.group(1)} out of range")
        return Choice.selected(idx)

    cand_keys = [key(c) for c in candidates]
    text_key = key(text)
    exact = [i for i, ck in enumerate(cand_keys) if ck == text_key]
    if len(exact) == 1:
        return Choice.selected(exact[0])
    if len(exact) > 1:
        raise ResponseParseError("response matches multiple candidates")
    contained = [i for i, ck in enumerate(cand_keys) if ck and ck in text_key]
    if len(contained) == 1:
        return Choice.selected(contained[0])
    if len(contained) > 1:
        raise ResponseParseError("response matches multiple candidates")
    raise ResponseParseError("no candidate recognized in response")
