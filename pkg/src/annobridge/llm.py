"""Chat-completions client: prompt rendering, retries, and answer extraction.

The gateway speaks the common chat API shape (POST <base_url>/chat/completions
with {model, messages, temperature}, bearer token from ANNOBRIDGE_API_KEY).
A scriptable in-process mock implements the same surface for offline runs and
tests; responses from the mock are byte-stable.
"""

from __future__ import annotations

import json
import re
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Callable, Protocol

import requests

from .corpus import MissingField, SentenceRecord
from .records import span_to_list

DEFAULT_TEMPERATURE = 0.0
DEFAULT_TIMEOUT_S = 120.0
API_KEY_ENV = "ANNOBRIDGE_API_KEY"


class TransportError(RuntimeError):
    """Network failure or server-side error; retryable."""


class AuthError(RuntimeError):
    """Credential rejected; retrying cannot help."""


class RateLimited(TransportError):
    """Throttled by the service; retried with backoff."""


class Exhausted(RuntimeError):
    """All retry attempts failed."""

    def __init__(self, attempts: int, last_error: Exception):
        self.attempts = attempts
        self.last_error = last_error
        super().__init__(f"gave up after {attempts} attempt(s): {last_error}")


class NoJsonFound(ValueError):
    """The response text contains no parseable JSON object."""


class TrailingGarbage(ValueError):
    """A second JSON object follows the first one."""


class ResponseRejected(ValueError):
    """The response parsed but does not satisfy the task contract."""


class CountMismatch(ResponseRejected):
    pass


class IdMismatch(ResponseRejected):
    pass


class LabelMismatch(ResponseRejected):
    pass


class UnknownId(KeyError):
    """The mock script has no entry for a requested record id."""


@dataclass(frozen=True)
class RawRusSpan:
    """A target-language surface the model claims corresponds to one span."""

    label: str
    span_id: str
    surface: str


class PromptName(str, Enum):
    TRANSFER_SPANS = "transfer_spans"
    TRANSLATE_1 = "translate1"
    TRANSLATE_2 = "translate2"


@dataclass(frozen=True)
class PromptTemplate:
    name: PromptName
    system_text: str
    few_shot: tuple[tuple[dict, dict], ...]


@dataclass
class ChatExchange:
    """One request/response round with the chat service."""

    model: str
    messages: list[dict]
    temperature: float
    raw_response: str | None = None
    usage: dict = field(default_factory=dict)
    attempts: int = 0


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 5
    backoff_base: float = 0.5
    validator: Callable[[str], object] | None = None


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model: str
    api_key: str | None = None
    timeout_s: float = DEFAULT_TIMEOUT_S


def _prompt_text(filename: str) -> str:
    return resources.files("annobridge.prompts").joinpath(filename).read_text("utf-8")


def _prompt_json(filename: str):
    return json.loads(_prompt_text(filename))


def load_template(name: PromptName, shots: list | None = None) -> PromptTemplate:
    """Load a shipped prompt template; ``shots`` overrides the default pairs."""
    if name is PromptName.TRANSFER_SPANS:
        system = _prompt_text("transfer_spans.txt")
        pairs = shots if shots is not None else _prompt_json("transfer_spans_shots.json")
    else:
        system = _prompt_text(f"{name.value}.txt")
        pairs = shots if shots is not None else _prompt_json("translate_shots.json")
    return PromptTemplate(
        name=name,
        system_text=system,
        few_shot=tuple((inp, out) for inp, out in pairs),
    )


def default_templates() -> dict[PromptName, PromptTemplate]:
    return {name: load_template(name) for name in PromptName}


def _dump(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False)


def request_payload(template: PromptTemplate, record: SentenceRecord) -> dict:
    """The JSON object sent as the final user turn."""
    if template.name is PromptName.TRANSFER_SPANS:
        if record.text_rus is None:
            raise MissingField("text_rus", record.id)
        if not record.spans:
            raise MissingField("spans", record.id)
        return {
            "id": record.id,
            "text": record.text,
            "text_rus": record.text_rus,
            "spans": [span_to_list(s) for s in record.spans],
        }
    return {"id": record.id, "text": record.text}


def render_prompt(
    template: PromptTemplate,
    record: SentenceRecord,
    temperature: float = DEFAULT_TEMPERATURE,
) -> ChatExchange:
    """Build the request half of an exchange: system text, few-shot turns,
    then the record serialized as the final user message. Deterministic."""
    messages = [{"role": "system", "content": template.system_text}]
    for shot_in, shot_out in template.few_shot:
        messages.append({"role": "user", "content": _dump(shot_in)})
        messages.append({"role": "assistant", "content": _dump(shot_out)})
    messages.append({"role": "user", "content": _dump(request_payload(template, record))})
    return ChatExchange(model="", messages=messages, temperature=temperature)


class ChatEndpoint(Protocol):
    model: str

    def send(self, messages: list[dict], temperature: float) -> tuple[str, dict]:
        """Return (assistant content, usage); may raise transport errors."""


class HttpChatEndpoint:
    """Client for an OpenAI-compatible chat-completions server."""

    def __init__(self, config: EndpointConfig, session: requests.Session | None = None):
        self.config = config
        self.model = config.model
        self._session = session or requests.Session()

    def send(self, messages: list[dict], temperature: float) -> tuple[str, dict]:
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        headers = {}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        try:
            response = self._session.post(
                url,
                json={"model": self.model, "messages": messages, "temperature": temperature},
                headers=headers,
                timeout=self.config.timeout_s,
            )
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        if response.status_code in (401, 403):
            raise AuthError(f"HTTP {response.status_code}: {response.text[:200]}")
        if response.status_code == 429:
            raise RateLimited(f"HTTP 429: {response.text[:200]}")
        if response.status_code >= 400:
            raise TransportError(f"HTTP {response.status_code}: {response.text[:200]}")
        try:
            body = response.json()
            content = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion body: {exc}") from exc
        return content, body.get("usage", {}) or {}


def chat(
    endpoint: ChatEndpoint,
    exchange: ChatExchange,
    policy: RetryPolicy,
    sleep: Callable[[float], None] = time.sleep,
) -> ChatExchange:
    """Send an exchange, retrying on transport errors and rejected responses.

    Returns the first response that passes the policy validator; raises
    Exhausted with the last error once max_attempts requests have failed.
    AuthError is raised immediately, retrying cannot fix credentials.
    """
    last_error: Exception | None = None
    for attempt in range(1, policy.max_attempts + 1):
        if attempt > 1 and policy.backoff_base > 0:
            sleep(policy.backoff_base * 2 ** (attempt - 2))
        try:
            content, usage = endpoint.send(exchange.messages, exchange.temperature)
        except AuthError:
            raise
        except TransportError as exc:
            last_error = exc
            continue
        exchange.model = exchange.model or getattr(endpoint, "model", "")
        exchange.raw_response = content
        exchange.usage = usage
        exchange.attempts = attempt
        if policy.validator is not None:
            try:
                policy.validator(content)
            except (ValueError, KeyError) as exc:
                last_error = exc
                continue
        return exchange
    raise Exhausted(policy.max_attempts, last_error or RuntimeError("no attempts made"))


class TranscriptingEndpoint:
    """Wrap an endpoint so every request/response pair lands in a JSONL file."""

    def __init__(self, inner: ChatEndpoint, path: str):
        self.inner = inner
        self.path = path
        self._lock = threading.Lock()

    @property
    def model(self) -> str:
        return self.inner.model

    def send(self, messages: list[dict], temperature: float) -> tuple[str, dict]:
        content, usage = self.inner.send(messages, temperature)
        line = json.dumps(
            {
                "model": self.model,
                "messages": messages,
                "response": content,
                "usage": usage,
            },
            ensure_ascii=False,
        )
        with self._lock, open(self.path, "a", encoding="utf-8") as handle:
            handle.write(line + "\n")
        return content, usage


_FENCE_RE = re.compile(r"```[a-zA-Z0-9_+-]*\s*\n?(.*?)```", re.DOTALL)


def _fenced_blocks(text: str) -> list[str]:
    return [m.group(1) for m in _FENCE_RE.finditer(text)]


def extract_json(text: str) -> dict:
    """Isolate the single top-level JSON object in a model response.

    Code fences are stripped first; prose before or after the object is
    ignored. Raises NoJsonFound when nothing parses, TrailingGarbage when a
    second object follows the first.
    """
    blocks = _fenced_blocks(text)
    source = "\n".join(blocks) if blocks else text

    decoder = json.JSONDecoder()
    first: dict | None = None
    position = 0
    index = source.find("{")
    while index != -1:
        try:
            value, end = decoder.raw_decode(source, index)
        except json.JSONDecodeError:
            index = source.find("{", index + 1)
            continue
        if isinstance(value, dict):
            first = value
            position = end
            break
        index = source.find("{", index + 1)
    if first is None:
        raise NoJsonFound(f"no JSON object in response: {text[:120]!r}")

    index = source.find("{", position)
    while index != -1:
        try:
            value, _ = decoder.raw_decode(source, index)
        except json.JSONDecodeError:
            index = source.find("{", index + 1)
            continue
        if isinstance(value, dict):
            raise TrailingGarbage("response contains a second JSON object")
        index = source.find("{", index + 1)
    return first


def validate_transfer_response(record: SentenceRecord, parsed: dict) -> list[RawRusSpan]:
    """Check a span-transfer answer against the request, pairwise by position.

    Accepts only when spans_rus exists, has one entry per requested span, and
    each entry is a [label, id, russian text] triple whose label and id match
    the request span at the same position.
    """
    items = parsed.get("spans_rus")
    if not isinstance(items, list):
        raise CountMismatch(f"record {record.id}: spans_rus missing or not a list")
    if len(items) != len(record.spans):
        raise CountMismatch(
            f"record {record.id}: expected {len(record.spans)} spans_rus entries, got {len(items)}"
        )
    raws: list[RawRusSpan] = []
    for position, (requested, item) in enumerate(zip(record.spans, items)):
        if not isinstance(item, (list, tuple)) or len(item) != 3:
            raise ResponseRejected(
                f"record {record.id}: spans_rus[{position}] must be [label, id, text], got {item!r}"
            )
        label, span_id, surface = item
        if str(span_id) != requested.span_id:
            raise IdMismatch(
                f"record {record.id}: spans_rus[{position}] id {span_id!r} != {requested.span_id!r}"
            )
        if str(label) != requested.label:
            raise LabelMismatch(
                f"record {record.id}: spans_rus[{position}] label {label!r} != {requested.label!r}"
            )
        if not isinstance(surface, str) or not surface:
            raise ResponseRejected(
                f"record {record.id}: spans_rus[{position}] has an empty surface"
            )
        raws.append(RawRusSpan(label=requested.label, span_id=requested.span_id, surface=surface))
    return raws


def validate_translation_response(record: SentenceRecord, parsed: dict) -> str:
    """Return the translated text from a translation answer, or reject it."""
    text_rus = parsed.get("text_rus")
    if not isinstance(text_rus, str) or not text_rus.strip():
        raise ResponseRejected(f"record {record.id}: text_rus missing or empty")
    if "id" in parsed and str(parsed["id"]) != record.id:
        raise IdMismatch(f"record {record.id}: response id {parsed['id']!r} does not match")
    return text_rus


class MockBehavior(Protocol):
    def respond(self, request: dict, prior_calls: int) -> str:
        """Produce the assistant content for a request; may raise."""


@dataclass(frozen=True)
class EchoIdentity:
    """Pretend the source text already is the translation.

    Translation requests get text_rus = text; transfer requests get back each
    requested span's own surface. Useful for offline smoke runs: every span
    then resolves exactly.
    """

    def respond(self, request: dict, prior_calls: int) -> str:
        reply = dict(request)
        if "spans" in request:
            reply["spans_rus"] = [
                [span[2], span[3], span[4]] for span in request["spans"]
            ]
        else:
            reply["text_rus"] = request["text"]
        return _dump(reply)


@dataclass(frozen=True)
class EchoGold:
    """Answer from a gold record set, keyed by request id."""

    gold: dict  # id -> SentenceRecord with text_rus (+ spans_rus for transfer)

    def respond(self, request: dict, prior_calls: int) -> str:
        record = self.gold.get(str(request.get("id")))
        if record is None:
            raise UnknownId(str(request.get("id")))
        reply = dict(request)
        if "spans" in request:
            by_id = {s.span_id: s for s in record.spans_rus or []}
            reply["spans_rus"] = [
                [span[2], span[3], by_id[span[3]].surface] for span in request["spans"]
            ]
        else:
            reply["text_rus"] = record.text_rus
        return _dump(reply)


@dataclass(frozen=True)
class EmitCode:
    """A code block instead of data, the way a drifting model answers."""

    def respond(self, request: dict, prior_calls: int) -> str:
        return (
            "```python\n"
            "def transfer_spans(text, spans):\n"
            "    return [find(text, s) for s in spans]\n"
            "```"
        )


@dataclass(frozen=True)
class EmitProse:
    text: str = "I located the spans you asked about in the Russian text."

    def respond(self, request: dict, prior_calls: int) -> str:
        return self.text


@dataclass(frozen=True)
class FailNTimes:
    """Fail the first n calls for an id, then delegate."""

    n: int
    then: MockBehavior
    failure: MockBehavior = EmitProse()

    def respond(self, request: dict, prior_calls: int) -> str:
        if prior_calls < self.n:
            return self.failure.respond(request, prior_calls)
        return self.then.respond(request, prior_calls - self.n)


class InterruptAfter:
    """Simulate the process dying after k successful responses.

    Raises KeyboardInterrupt on call k+1 and onward, which the batch loop
    deliberately does not catch.
    """

    def __init__(self, k: int, inner: MockBehavior | None = None):
        self.k = k
        self.inner = inner or EchoIdentity()
        self._served = 0
        self._lock = threading.Lock()

    def respond(self, request: dict, prior_calls: int) -> str:
        with self._lock:
            if self._served >= self.k:
                raise KeyboardInterrupt
            self._served += 1
        return self.inner.respond(request, prior_calls)


@dataclass
class MockScript:
    """Per-record-id behaviors with an optional default."""

    behaviors: dict[str, MockBehavior] = field(default_factory=dict)
    default: MockBehavior | None = None

    def for_id(self, record_id: str) -> MockBehavior:
        behavior = self.behaviors.get(record_id, self.default)
        if behavior is None:
            raise UnknownId(record_id)
        return behavior


class MockChatEndpoint:
    """Offline, deterministic stand-in for HttpChatEndpoint.

    Counts calls globally and per record id so tests can assert how many
    requests a pipeline actually issued.
    """

    def __init__(self, script: MockScript, model: str = "mock-chat"):
        self.script = script
        self.model = model
        self.calls = 0
        self.calls_by_id: Counter[str] = Counter()
        self._lock = threading.Lock()

    def send(self, messages: list[dict], temperature: float) -> tuple[str, dict]:
        request = json.loads(messages[-1]["content"])
        record_id = str(request.get("id"))
        with self._lock:
            prior = self.calls_by_id[record_id]
            self.calls += 1
            self.calls_by_id[record_id] += 1
        behavior = self.script.for_id(record_id)
        content = behavior.respond(request, prior)
        return content, {"prompt_tokens": 0, "completion_tokens": 0}


def mock_llm(script: MockScript, model: str = "mock-chat") -> MockChatEndpoint:
    """Build a scriptable offline endpoint (test double for the HTTP client)."""
    return MockChatEndpoint(script, model=model)


def transfer_validator(record: SentenceRecord) -> Callable[[str], list[RawRusSpan]]:
    """Response check used by the retry policy for span-transfer requests."""

    def check(content: str) -> list[RawRusSpan]:
        return validate_transfer_response(record, extract_json(content))

    return check


def translation_validator(record: SentenceRecord) -> Callable[[str], str]:
    def check(content: str) -> str:
        return validate_translation_response(record, extract_json(content))

    return check
