"""Uniform chat-completion interface.

Two implementations: an OpenAI-compatible HTTP client for live runs and
a deterministic scripted backend that replays a fixed transcript for
offline tests. Temperature defaults to 0.0 in live mode to keep runs as
reproducible as the API allows.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import httpx

from .memory import estimate_tokens

logger = logging.getLogger(__name__)

API_KEY_ENV = "SPARRING_LLM_API_KEY"
BASE_URL_ENV = "SPARRING_LLM_BASE_URL"

MAX_RETRIES = 3
BACKOFF_BASE_S = 0.5

VALID_ROLES = ("system", "user", "assistant")


class BackendError(Exception):
    """Base for all completion-backend failures."""


class BackendUnavailable(BackendError):
    """Transport kept failing after all retries, or the API rejected us."""


class MalformedResponse(BackendError):
    """The wire payload did not contain an answer."""


class BudgetExceeded(BackendError):
    """The API reported a context-length overflow."""


class TranscriptExhausted(BackendError):
    """The scripted backend ran out of entries."""


class MismatchError(BackendError):
    """A transcript entry's match pattern was absent from the prompt."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in VALID_ROLES:
            raise ValueError(f"invalid role: {self.role!r}")
        if not self.content and self.role != "assistant":
            raise ValueError("content may be empty only for assistant placeholders")

    def to_dict(self) -> dict:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class CompletionRequest:
    messages: list[ChatMessage]
    model_id: str = "gpt-3.5-turbo"
    temperature: float = 0.0
    max_answer_tokens: int = 512

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.messages[0].role != "system":
            raise ValueError("first message must have role system")
        if not (0.0 <= self.temperature <= 2.0):
            raise ValueError("temperature must be in [0, 2]")


@dataclass(frozen=True)
class LlmAnswer:
    text: str
    prompt_tokens: int
    answer_tokens: int
    backend_id: str

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.answer_tokens < 0:
            raise ValueError("token counts must be >= 0")


@dataclass(frozen=True)
class TranscriptEntry:
    answer: str
    match: str | None = None


@dataclass
class Transcript:
    entries: list[TranscriptEntry] = field(default_factory=list)
    cursor: int = 0


def load_transcript(path: str | Path) -> Transcript:
    """Read a JSONL transcript: one {match?, answer} object per line."""
    entries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{lineno}: invalid transcript line: {exc}") from exc
        if "answer" not in obj:
            raise ValueError(f"{path}:{lineno}: transcript entry missing 'answer'")
        entries.append(TranscriptEntry(answer=obj["answer"], match=obj.get("match")))
    return Transcript(entries=entries)


def save_transcript(transcript: Transcript, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for entry in transcript.entries:
            obj: dict = {"answer": entry.answer}
            if entry.match is not None:
                obj["match"] = entry.match
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def scripted_next(transcript: Transcript, prompt_text: str) -> LlmAnswer:
    """Pop the next transcript entry, enforcing its match pattern.

    A failing match means the prompt drifted since the transcript was
    recorded -- exactly the regression the pattern exists to catch.
    """
    if transcript.cursor >= len(transcript.entries):
        raise TranscriptExhausted(f"transcript exhausted after {transcript.cursor} entries")
    entry = transcript.entries[transcript.cursor]
    if entry.match is not None and entry.match not in prompt_text:
        raise MismatchError(
            f"entry {transcript.cursor}: pattern {entry.match!r} not found in prompt"
        )
    transcript.cursor += 1
    return LlmAnswer(
        text=entry.answer,
        prompt_tokens=estimate_tokens(prompt_text),
        answer_tokens=estimate_tokens(entry.answer),
        backend_id="scripted",
    )


class Backend(Protocol):
    backend_id: str

    def complete(self, request: CompletionRequest) -> LlmAnswer: ...


class ScriptedBackend:
    """Deterministic backend replaying a fixed transcript in call order."""

    def __init__(self, transcript: Transcript):
        self.backend_id = "scripted"
        self.transcript = transcript
        self._lock = threading.Lock()

    def complete(self, request: CompletionRequest) -> LlmAnswer:
        prompt_text = "\n".join(m.content for m in request.messages)
        with self._lock:
            return scripted_next(self.transcript, prompt_text)


class HttpChatBackend:
    """OpenAI-compatible chat completions client.

    POSTs to <base_url>/v1/chat/completions and retries transient
    transport failures (connection errors, 429, 5xx) up to MAX_RETRIES
    times with exponential backoff starting at BACKOFF_BASE_S.
    """

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        timeout_s: float = 60.0,
        sleeper: Callable[[float], None] = time.sleep,
    ):
        self.base_url = (base_url or os.environ.get(BASE_URL_ENV, "https://api.openai.com")).rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.timeout_s = timeout_s
        self.backend_id = f"http:{self.base_url}"
        self.last_attempts = 0
        self._sleep = sleeper

    def complete(self, request: CompletionRequest) -> LlmAnswer:
        body = {
            "model": request.model_id,
            "messages": [m.to_dict() for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_answer_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        url = f"{self.base_url}/v1/chat/completions"

        last_error: Exception | None = None
        self.last_attempts = 0
        for attempt in range(MAX_RETRIES + 1):
            if attempt:
                delay = BACKOFF_BASE_S * (2 ** (attempt - 1))
                logger.info("retrying completion (attempt %d) after %.1fs", attempt + 1, delay)
                self._sleep(delay)
            self.last_attempts += 1
            try:
                response = httpx.post(url, json=body, headers=headers, timeout=self.timeout_s)
            except httpx.HTTPError as exc:
                last_error = exc
                continue
            if response.status_code == 429 or response.status_code >= 500:
                last_error = BackendUnavailable(f"HTTP {response.status_code}")
                continue
            if response.status_code == 400 and _is_context_overflow(response):
                raise BudgetExceeded(response.text[:500])
            if response.status_code != 200:
                raise BackendUnavailable(f"HTTP {response.status_code}: {response.text[:200]}")
            return self._parse(response)
        raise BackendUnavailable(f"gave up after {self.last_attempts} attempts: {last_error}")

    def _parse(self, response: httpx.Response) -> LlmAnswer:
        try:
            payload = response.json()
            text = payload["choices"][0]["message"]["content"]
        except (ValueError, LookupError, TypeError) as exc:
            raise MalformedResponse(f"no answer in payload: {exc}") from exc
        if text is None:
            raise MalformedResponse("answer content was null")
        usage = payload.get("usage") or {}
        return LlmAnswer(
            text=text,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            answer_tokens=int(usage.get("completion_tokens", 0)),
            backend_id=self.backend_id,
        )


def _is_context_overflow(response: httpx.Response) -> bool:
    try:
        err = response.json().get("error") or {}
    except ValueError:
        return False
    blob = (str(err.get("code", "")) + " " + str(err.get("message", ""))).lower()
    return "context_length" in blob or "context length" in blob or "maximum context" in blob


def complete(backend: Backend, request: CompletionRequest) -> LlmAnswer:
    """Validate the request and delegate to the backend."""
    if not isinstance(request, CompletionRequest):
        raise TypeError("request must be a CompletionRequest")
    return backend.complete(request)
