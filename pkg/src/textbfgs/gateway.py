"""Uniform access to chat-completion and embedding backends.

A Gateway pairs one chat backend with one embedding backend and owns token
accounting for a single optimization run. Live backends speak the
OpenAI-compatible wire protocol; the replay backend serves recorded fixtures
keyed by a stable hash of the normalized message list; the scripted backend
answers from substring-matching rules and is what the offline test suites
drive the optimizer with.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import httpx

from .domain import TokenLedger
from .errors import (
    BackendUnreachable,
    EmptyText,
    FixtureMiss,
    IoFailure,
    SchemaViolation,
    TruncationSuspected,
)

ROLE_SYSTEM = "system"
ROLE_USER = "user"
ROLE_ASSISTANT = "assistant"
_ROLES = (ROLE_SYSTEM, ROLE_USER, ROLE_ASSISTANT)


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in _ROLES:
            raise ValueError(f"unknown message role {self.role!r}")


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("usage counts must be non-negative")


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    temperature: float = 0.7
    top_p: float = 0.95
    max_tokens: int = 4096
    extra_params: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not (0 < self.top_p <= 1):
            raise ValueError("top_p must be in (0, 1]")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")

    def flat_text(self) -> str:
        return "\n".join(m.content for m in self.messages)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    usage: Usage


def request_hash(request: ChatRequest) -> str:
    """Stable hash of the normalized message list.

    Only roles and contents participate, so the key is immune to field
    reordering and catches any prompt drift.
    """
    normalized = [{"content": m.content, "role": m.role} for m in request.messages]
    blob = json.dumps(normalized, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _whitespace_tokens(text: str) -> int:
    return len(text.split())


class ChatBackend(Protocol):
    backend_id: str

    def complete(self, request: ChatRequest) -> ChatResponse: ...


class EmbedBackend(Protocol):
    backend_id: str
    dim: int

    def embed_text(self, text: str) -> tuple[float, ...]: ...


class OpenAIChatBackend:
    """Chat completions over an OpenAI-compatible HTTP endpoint.

    Transient transport failures (connection errors, HTTP 5xx/429) are
    retried with exponential backoff; anything the model says, including
    garbage, is returned as-is for the caller's own retry logic.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 120.0,
        retries: int = 3,
        backoff: float = 1.0,
        sleep: Callable[[float], None] = time.sleep,
        client: httpx.Client | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.retries = retries
        self.backoff = backoff
        self._sleep = sleep
        self._client = client or httpx.Client(timeout=timeout)
        self.backend_id = f"openai:{model}@{self.base_url}"

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def complete(self, request: ChatRequest) -> ChatResponse:
        payload: dict[str, object] = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        }
        payload.update(request.extra_params)
        data = self._post_with_retries(f"{self.base_url}/chat/completions", payload)
        try:
            text = data["choices"][0]["message"]["content"]
            usage = data.get("usage") or {}
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendUnreachable(f"malformed completion payload: {exc}") from exc
        return ChatResponse(
            text=text or "",
            usage=Usage(
                prompt_tokens=int(usage.get("prompt_tokens", 0)),
                completion_tokens=int(usage.get("completion_tokens", 0)),
            ),
        )

    def _post_with_retries(self, url: str, payload: dict) -> dict:
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt > 0:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            try:
                response = self._client.post(url, headers=self._headers(), json=payload)
            except httpx.TransportError as exc:
                last_error = exc
                continue
            if response.status_code in (429,) or response.status_code >= 500:
                last_error = BackendUnreachable(f"HTTP {response.status_code}: {response.text[:200]}")
                continue
            if response.status_code >= 400:
                raise BackendUnreachable(f"HTTP {response.status_code}: {response.text[:200]}")
            return response.json()
        raise BackendUnreachable(f"backend unreachable after {self.retries} retries: {last_error}")


class OpenAIEmbedBackend:
    """Embeddings over an OpenAI-compatible HTTP endpoint."""

    def __init__(
        self,
        base_url: str,
        model: str,
        dim: int,
        api_key: str | None = None,
        timeout: float = 30.0,
        retries: int = 3,
        backoff: float = 1.0,
        sleep: Callable[[float], None] = time.sleep,
        client: httpx.Client | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.dim = dim
        self.api_key = api_key
        self.retries = retries
        self.backoff = backoff
        self._sleep = sleep
        self._client = client or httpx.Client(timeout=timeout)
        self.backend_id = f"openai-embed:{model}@{self.base_url}"

    def embed_text(self, text: str) -> tuple[float, ...]:
        if not text:
            raise EmptyText("cannot embed empty text")
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt > 0:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            try:
                response = self._client.post(
                    f"{self.base_url}/embeddings",
                    headers=headers,
                    json={"model": self.model, "input": [text]},
                )
            except httpx.TransportError as exc:
                last_error = exc
                continue
            if response.status_code in (429,) or response.status_code >= 500:
                last_error = BackendUnreachable(f"HTTP {response.status_code}")
                continue
            if response.status_code >= 400:
                raise BackendUnreachable(f"HTTP {response.status_code}: {response.text[:200]}")
            data = response.json()
            return tuple(float(x) for x in data["data"][0]["embedding"])
        raise BackendUnreachable(f"embedding backend unreachable: {last_error}")


class HashEmbedder:
    """Seeded feature-hash embedding; deterministic and offline.

    Tokens are hashed into a fixed number of signed buckets, so texts that
    share vocabulary land near each other under cosine. Good enough to make
    retrieval reproducible in tests, and never returns a zero vector.
    """

    _token_re = re.compile(r"[a-z0-9_]+")

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim <= 0:
            raise ValueError("embedding dimension must be positive")
        self.dim = dim
        self.seed = seed
        self.backend_id = f"hash-embed:d={dim}:seed={seed}"

    def embed_text(self, text: str) -> tuple[float, ...]:
        if not text:
            raise EmptyText("cannot embed empty text")
        tokens = self._token_re.findall(text.lower())
        if not tokens:
            tokens = [text]
        vec = [0.0] * self.dim
        for token in tokens:
            digest = hashlib.sha256(f"{self.seed}\x00{token}".encode("utf-8")).digest()
            index = int.from_bytes(digest[:4], "big") % self.dim
            sign = 1.0 if digest[4] % 2 == 0 else -1.0
            vec[index] += sign
        if all(x == 0.0 for x in vec):
            # opposing tokens can cancel a bucket; nudge one bucket so the
            # vector stays usable under cosine
            vec[0] = 1.0
        return tuple(vec)


class ReplayChatBackend:
    """Serves recorded responses keyed by request hash; bit-deterministic."""

    def __init__(self, fixture_path: str | Path):
        self.fixture_path = Path(fixture_path)
        self.backend_id = f"replay:{self.fixture_path.name}"
        self._entries: dict[str, ChatResponse] = {}
        if not self.fixture_path.exists():
            raise IoFailure(f"no replay fixture at {self.fixture_path}")
        with self.fixture_path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise SchemaViolation(
                        f"{self.fixture_path}:{lineno}: fixture record is not valid JSON"
                    ) from exc
                for name in ("request_hash", "response_text", "prompt_tokens", "completion_tokens"):
                    if name not in record:
                        raise SchemaViolation(
                            f"{self.fixture_path}:{lineno}: missing field {name!r}"
                        )
                # first record wins so replay is a pure function of the hash
                self._entries.setdefault(
                    record["request_hash"],
                    ChatResponse(
                        text=record["response_text"],
                        usage=Usage(
                            prompt_tokens=int(record["prompt_tokens"]),
                            completion_tokens=int(record["completion_tokens"]),
                        ),
                    ),
                )

    def __len__(self) -> int:
        return len(self._entries)

    def complete(self, request: ChatRequest) -> ChatResponse:
        key = request_hash(request)
        try:
            return self._entries[key]
        except KeyError:
            raise FixtureMiss(f"no recorded response for request hash {key}") from None


class RecordingChatBackend:
    """Wraps another chat backend and appends replay fixture records."""

    def __init__(self, inner: ChatBackend, fixture_path: str | Path):
        self.inner = inner
        self.fixture_path = Path(fixture_path)
        self.backend_id = f"record({inner.backend_id})"
        self._seen: set[str] = set()
        self.fixture_path.parent.mkdir(parents=True, exist_ok=True)
        # appending to an existing fixture must not duplicate hashes
        if self.fixture_path.exists():
            with self.fixture_path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        self._seen.add(json.loads(line)["request_hash"])

    def complete(self, request: ChatRequest) -> ChatResponse:
        response = self.inner.complete(request)
        key = request_hash(request)
        if key not in self._seen:
            record = {
                "request_hash": key,
                "response_text": response.text,
                "prompt_tokens": response.usage.prompt_tokens,
                "completion_tokens": response.usage.completion_tokens,
            }
            with self.fixture_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
            self._seen.add(key)
        return response


@dataclass(frozen=True)
class ScriptRule:
    """Respond with `text` when every substring in `when_contains` is present."""

    text: str
    when_contains: tuple[str, ...] = ()

    def matches(self, prompt: str) -> bool:
        return all(needle in prompt for needle in self.when_contains)


class ScriptedChatBackend:
    """Rule-driven backend for offline runs; first matching rule wins.

    Usage counts are whitespace-delimited token counts, which keeps ledgers
    meaningful without a live tokenizer.
    """

    def __init__(self, rules: Sequence[ScriptRule], default: str = "", name: str = "scripted"):
        self.rules = tuple(rules)
        self.default = default
        self.backend_id = f"scripted:{name}"

    def complete(self, request: ChatRequest) -> ChatResponse:
        prompt = request.flat_text()
        text = self.default
        for rule in self.rules:
            if rule.matches(prompt):
                text = rule.text
                break
        return ChatResponse(
            text=text,
            usage=Usage(
                prompt_tokens=_whitespace_tokens(prompt),
                completion_tokens=_whitespace_tokens(text),
            ),
        )


class Gateway:
    """One chat backend + one embedding backend + the run's token meter.

    Meter updates are atomic per call; backends themselves are shareable
    across gateways and workers.
    """

    def __init__(self, chat_backend: ChatBackend, embed_backend: EmbedBackend):
        self.chat_backend = chat_backend
        self.embed_backend = embed_backend
        self._lock = threading.Lock()
        self._chat_calls = 0
        self._embed_calls = 0
        self._prompt_tokens = 0
        self._completion_tokens = 0

    @property
    def embed_dim(self) -> int:
        return self.embed_backend.dim

    def chat(self, request: ChatRequest, required_tags: Sequence[str] = ()) -> ChatResponse:
        """One chat call; counts usage even when the result is unusable.

        Raises TruncationSuspected when the response both exhausted
        max_tokens and left a required closing tag open.
        """
        response = self.chat_backend.complete(request)
        with self._lock:
            self._chat_calls += 1
            self._prompt_tokens += response.usage.prompt_tokens
            self._completion_tokens += response.usage.completion_tokens
        if required_tags and response.usage.completion_tokens >= request.max_tokens:
            missing = [tag for tag in required_tags if tag not in response.text]
            if missing:
                raise TruncationSuspected(
                    f"response hit max_tokens={request.max_tokens} without closing: {missing}"
                )
        return response

    def embed(self, text: str) -> tuple[float, ...]:
        if not text:
            raise EmptyText("cannot embed empty text")
        vector = self.embed_backend.embed_text(text)
        with self._lock:
            self._embed_calls += 1
        return vector

    @property
    def ledger(self) -> TokenLedger:
        with self._lock:
            return TokenLedger(
                chat_calls=self._chat_calls,
                embed_calls=self._embed_calls,
                prompt_tokens=self._prompt_tokens,
                completion_tokens=self._completion_tokens,
            )
