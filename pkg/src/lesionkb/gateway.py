"""LLM providers and the gateway every generation call goes through."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol

from .errors import FixtureMiss, FormatViolation, ProviderUnavailable, ScoreNotFound, TransportError
from .jsonl import iter_jsonl, write_jsonl
from .parsing import parse_score
from .prompts import render_bytes, render_prompt, slot_digest

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GenerationRequest:
    template_id: str
    slots: Mapping[str, str]
    temperature: float = 0.2
    top_p: float = 1.0
    max_retries: int = 1

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        object.__setattr__(self, "slots", {k: str(v) for k, v in self.slots.items()})

    @property
    def messages(self) -> list[dict[str, str]]:
        return render_prompt(self.template_id, self.slots)

    @property
    def slot_digest(self) -> str:
        return slot_digest(self.slots)

    def prompt_bytes(self) -> bytes:
        return render_bytes(self.messages)


class LlmProvider(Protocol):
    def generate(self, request: GenerationRequest) -> str: ...


class MockProvider:
    """Replays responses keyed by ``(template_id, slot_digest)``; an unknown request is an error."""

    def __init__(self, responses: Mapping[tuple[str, str], str]):
        self.responses = dict(responses)

    @classmethod
    def from_file(cls, path: str | Path) -> "MockProvider":
        responses: dict[tuple[str, str], str] = {}
        for lineno, obj in iter_jsonl(path):
            try:
                key = (str(obj["template_id"]), str(obj["slot_digest"]))
                text = obj["response_text"]
            except KeyError as exc:
                raise FormatViolation(f"missing field {exc.args[0]!r}", line=lineno, path=str(path)) from exc
            if key in responses and responses[key] != text:
                raise FormatViolation("conflicting responses for one request", line=lineno, path=str(path))
            responses[key] = str(text)
        return cls(responses)

    def generate(self, request: GenerationRequest) -> str:
        # Render anyway so a malformed request fails the same way it would live.
        request.messages
        try:
            return self.responses[(request.template_id, request.slot_digest)]
        except KeyError:
            raise FixtureMiss(
                f"no fixture for template {request.template_id!r} with slot digest {request.slot_digest}"
            ) from None


class RecordingProvider:
    """Passes calls through and keeps every exchange, to be written out as a mock fixture file."""

    def __init__(self, inner: LlmProvider):
        self.inner = inner
        self.records: dict[tuple[str, str], str] = {}
        self._lock = threading.Lock()

    def generate(self, request: GenerationRequest) -> str:
        text = self.inner.generate(request)
        with self._lock:
            self.records.setdefault((request.template_id, request.slot_digest), text)
        return text

    def save(self, path: str | Path) -> int:
        rows = [
            {"template_id": t, "slot_digest": d, "response_text": text}
            for (t, d), text in sorted(self.records.items())
        ]
        return write_jsonl(path, rows)


class HttpChatProvider:
    """OpenAI-compatible ``chat/completions`` endpoint."""

    def __init__(self, endpoint: str, model: str, api_key_env: str = "LESIONKB_API_KEY", timeout: float = 120.0):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout

    def generate(self, request: GenerationRequest) -> str:
        body = json.dumps({
            "model": self.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "top_p": request.top_p,
        }).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        http_request = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(http_request, timeout=self.timeout) as response:
                payload = json.loads(response.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            if exc.code == 429 or exc.code >= 500:
                raise TransportError(f"HTTP {exc.code} from {self.endpoint}") from exc
            raise ProviderUnavailable(f"HTTP {exc.code} from {self.endpoint}: {exc.reason}") from exc
        except OSError as exc:
            raise TransportError(str(exc)) from exc
        try:
            return payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderUnavailable(f"unexpected response shape from {self.endpoint}") from exc


@dataclass
class GatewayMetrics:
    calls: int = 0
    transport_retries: int = 0
    score_parse_failures: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def bump(self, name: str, amount: int = 1) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + amount)


class Gateway:
    """Retrying front end over a provider.

    Transport failures are retried with exponential backoff; anything else
    (including a fixture miss) propagates immediately.
    """

    def __init__(self, provider: LlmProvider, transport_retries: int = 3, backoff: float = 0.5,
                 sleep: Callable[[float], None] = time.sleep):
        self.provider = provider
        self.transport_retries = transport_retries
        self.backoff = backoff
        self.sleep = sleep
        self.metrics = GatewayMetrics()

    def generate(self, request: GenerationRequest) -> str:
        self.metrics.bump("calls")
        attempt = 0
        while True:
            try:
                return self.provider.generate(request)
            except TransportError as exc:
                if attempt >= self.transport_retries:
                    raise ProviderUnavailable(
                        f"{request.template_id}: gave up after {attempt} retries ({exc})"
                    ) from exc
                delay = self.backoff * (2 ** attempt)
                attempt += 1
                self.metrics.bump("transport_retries")
                logger.warning("transport failure on %s (%s); retry %d in %.2fs",
                               request.template_id, exc, attempt, delay)
                self.sleep(delay)

    generate_with_retry = generate

    def score(self, request: GenerationRequest, scale: tuple[int, int]) -> int:
        """Generate and parse an integer score; unparseable twice means the scale minimum."""
        raw = self.generate(request)
        try:
            return parse_score(raw, scale)
        except ScoreNotFound:
            self.metrics.bump("score_parse_failures")
        raw = self.generate(request)
        try:
            return parse_score(raw, scale)
        except ScoreNotFound:
            self.metrics.bump("score_parse_failures")
            logger.warning("%s: no score in %r; scoring at the minimum %d", request.template_id, raw[:80], scale[0])
            return scale[0]
