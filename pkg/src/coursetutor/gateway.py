"""Provider-agnostic LLM access: completions, embeddings, retries, audit.

Every outbound attempt lands in the audit log exactly once, including
failures. Embeddings are L2-normalized here no matter what the provider
returned, so downstream cosine math can trust unit norms.
"""

from __future__ import annotations

import hashlib
import json
import random
import threading
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Optional, Protocol, Sequence, Union

import httpx
import numpy as np

from .errors import (
    MockScriptExhausted,
    ProviderError,
    ProviderRejected,
    ProviderTimeout,
    RetriesExhausted,
    TransientProviderError,
)
from .ingest import token_count, tokenize


DEFAULT_TIMEOUT_MS = 30_000
DEFAULT_MAX_RETRIES = 2
DEFAULT_BACKOFF_BASE_S = 0.5
DEFAULT_CONCURRENCY = 8
# A reply longer than max_tokens * 8 chars is runaway output; cut it off.
RUNAWAY_CHARS_PER_TOKEN = 8


class Role(str, Enum):
    System = "system"
    User = "user"
    Assistant = "assistant"


class FinishReason(str, Enum):
    Stop = "stop"
    Length = "length"
    Error = "error"


@dataclass(frozen=True)
class ChatMessage:
    role: Role
    content: str

    def __post_init__(self) -> None:
        if self.role in (Role.System, Role.User) and not self.content.strip():
            raise ValueError(f"{self.role.value} message content must be non-empty")


@dataclass(frozen=True)
class CompletionRequest:
    messages: tuple[ChatMessage, ...]
    model_id: str
    tag: str  # audit/routing label: "intent", "decompose", "answer", "detect", "rewrite", ...
    temperature: float = 0.0
    max_tokens: int = 1024

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.messages[0].role is not Role.System:
            raise ValueError("first message must be a system message")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if not self.tag:
            raise ValueError("tag must be non-empty")


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int
    completion_tokens: int


@dataclass(frozen=True)
class CompletionResult:
    text: str
    finish_reason: FinishReason
    usage: Usage
    provider_id: str
    latency_ms: float


@dataclass(frozen=True)
class ProviderReply:
    """Raw provider output before gateway post-processing."""

    text: str
    finish_reason: FinishReason = FinishReason.Stop
    prompt_tokens: Optional[int] = None
    completion_tokens: Optional[int] = None


class CompletionProvider(Protocol):
    provider_id: str

    def complete_once(self, request: CompletionRequest, timeout_ms: int) -> ProviderReply:
        ...


class EmbeddingBackend(Protocol):
    embedder_id: str

    def embed_once(self, texts: Sequence[str], timeout_ms: int) -> list[np.ndarray]:
        ...


# -- audit -------------------------------------------------------------------

class AuditLog:
    """In-memory audit sink; also the base for the file-backed one."""

    def __init__(self) -> None:
        self.entries: list[dict] = []
        self._lock = threading.Lock()

    def record(self, entry: dict) -> None:
        with self._lock:
            self.entries.append(entry)


class FileAuditLog(AuditLog):
    def __init__(self, path: Path | str):
        super().__init__()
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def record(self, entry: dict) -> None:
        super().record(entry)
        with self._lock:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, ensure_ascii=False) + "\n")


def _request_digest(request: CompletionRequest) -> str:
    canonical = json.dumps(
        {
            "model_id": request.model_id,
            "tag": request.tag,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "messages": [
                {"role": m.role.value, "content": m.content} for m in request.messages
            ],
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# -- providers ---------------------------------------------------------------

@dataclass
class MockFailure:
    kind: str  # "transient" | "timeout" | "rejected"


ScriptItem = Union[str, MockFailure]


class MockProvider:
    """Scripted deterministic mock.

    The script maps a matcher to an ordered response list. A matcher is
    either an exact request tag or a substring probed against the request's
    message contents (tag match wins; substring keys are tried in insertion
    order). Responses are consumed one per call; an exhausted or missing
    matcher raises MockScriptExhausted.
    """

    provider_id = "mock"

    def __init__(self, script: Mapping[str, Sequence[ScriptItem]]):
        self._script: dict[str, list[ScriptItem]] = {
            key: list(items) for key, items in script.items()
        }
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: Path | str) -> "MockProvider":
        """Load a JSON script: {matcher: [response | {"error": kind}, ...]}."""
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        script: dict[str, list[ScriptItem]] = {}
        for key, items in data.items():
            parsed: list[ScriptItem] = []
            for item in items:
                if isinstance(item, str):
                    parsed.append(item)
                elif isinstance(item, dict) and "error" in item:
                    parsed.append(MockFailure(item["error"]))
                else:
                    raise ValueError(f"bad mock script entry under {key!r}: {item!r}")
            script[key] = parsed
        return cls(script)

    def _matcher_for(self, request: CompletionRequest) -> Optional[str]:
        if request.tag in self._script:
            return request.tag
        joined = "\n".join(m.content for m in request.messages)
        for key in self._script:
            if key in joined:
                return key
        return None

    def complete_once(self, request: CompletionRequest, timeout_ms: int) -> ProviderReply:
        with self._lock:
            key = self._matcher_for(request)
            if key is None or not self._script[key]:
                raise MockScriptExhausted(
                    f"no scripted response for tag {request.tag!r}"
                )
            item = self._script[key].pop(0)
        if isinstance(item, MockFailure):
            if item.kind == "timeout":
                raise ProviderTimeout("scripted timeout")
            if item.kind == "rejected":
                raise ProviderRejected("scripted rejection")
            raise TransientProviderError(f"scripted {item.kind} failure")
        return ProviderReply(text=item)


class HttpChatProvider:
    """Chat-completion wire format over HTTP. The bearer token comes from the
    environment at construction, never from config files."""

    def __init__(
        self,
        base_url: str,
        api_key: Optional[str],
        client: Optional[httpx.Client] = None,
    ):
        self.provider_id = f"http:{base_url}"
        self.base_url = base_url.rstrip("/")
        self._headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = client or httpx.Client()

    def complete_once(self, request: CompletionRequest, timeout_ms: int) -> ProviderReply:
        payload = {
            "model": request.model_id,
            "messages": [
                {"role": m.role.value, "content": m.content} for m in request.messages
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        try:
            response = self._client.post(
                f"{self.base_url}/chat/completions",
                json=payload,
                headers=self._headers,
                timeout=timeout_ms / 1000.0,
            )
        except httpx.TimeoutException as exc:
            raise ProviderTimeout(str(exc)) from exc
        except httpx.HTTPError as exc:
            raise TransientProviderError(str(exc)) from exc
        if response.status_code >= 500:
            raise TransientProviderError(f"provider returned {response.status_code}")
        if response.status_code >= 400:
            raise ProviderRejected(f"provider returned {response.status_code}")
        try:
            body = response.json()
            choice = body["choices"][0]
            text = choice["message"]["content"]
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ProviderRejected(f"malformed provider response: {exc}") from exc
        finish = FinishReason.Length if choice.get("finish_reason") == "length" else FinishReason.Stop
        usage = body.get("usage") or {}
        return ProviderReply(
            text=text,
            finish_reason=finish,
            prompt_tokens=usage.get("prompt_tokens"),
            completion_tokens=usage.get("completion_tokens"),
        )


class HttpEmbedder:
    def __init__(
        self,
        base_url: str,
        api_key: Optional[str],
        model_id: str,
        client: Optional[httpx.Client] = None,
    ):
        self.embedder_id = f"http:{model_id}"
        self.base_url = base_url.rstrip("/")
        self.model_id = model_id
        self._headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = client or httpx.Client()

    def embed_once(self, texts: Sequence[str], timeout_ms: int) -> list[np.ndarray]:
        try:
            response = self._client.post(
                f"{self.base_url}/embeddings",
                json={"model": self.model_id, "input": list(texts)},
                headers=self._headers,
                timeout=timeout_ms / 1000.0,
            )
        except httpx.TimeoutException as exc:
            raise ProviderTimeout(str(exc)) from exc
        except httpx.HTTPError as exc:
            raise TransientProviderError(str(exc)) from exc
        if response.status_code >= 500:
            raise TransientProviderError(f"provider returned {response.status_code}")
        if response.status_code >= 400:
            raise ProviderRejected(f"provider returned {response.status_code}")
        try:
            rows = response.json()["data"]
            return [np.asarray(row["embedding"], dtype=np.float64) for row in rows]
        except (KeyError, TypeError, ValueError) as exc:
            raise ProviderRejected(f"malformed embedding response: {exc}") from exc


class FallbackEmbedder:
    """Deterministic signed feature hashing of lexical tokens.

    Needs no network and no model weights, which keeps retrieval usable when
    the embedding provider is down and makes tests hermetic. Vectors are
    unit-norm by construction.
    """

    def __init__(self, dimension: int = 64):
        self.dimension = dimension
        self.embedder_id = f"feature-hash-{dimension}-v1"

    def embed_once(self, texts: Sequence[str], timeout_ms: int = 0) -> list[np.ndarray]:
        return [self._one(text) for text in texts]

    def _one(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        for token in tokenize(text):
            digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
            value = int.from_bytes(digest, "little")
            bucket = value % self.dimension
            sign = 1.0 if value >> 63 else -1.0
            vec[bucket] += sign
        if not vec.any():
            vec[0] = 1.0  # token-less text still embeds deterministically
        return vec / np.linalg.norm(vec)


# -- gateway -----------------------------------------------------------------

class Gateway:
    """Retry, audit, concurrency-cap, and normalize around a provider pair."""

    def __init__(
        self,
        provider: CompletionProvider,
        embedder: EmbeddingBackend,
        audit: Optional[AuditLog] = None,
        timeout_ms: int = DEFAULT_TIMEOUT_MS,
        max_retries: int = DEFAULT_MAX_RETRIES,
        backoff_base_s: float = DEFAULT_BACKOFF_BASE_S,
        concurrency: int = DEFAULT_CONCURRENCY,
        sleep: Callable[[float], None] = time.sleep,
        rng: Optional[random.Random] = None,
    ):
        self.provider = provider
        self.embedder = embedder
        self.audit = audit if audit is not None else AuditLog()
        self.timeout_ms = timeout_ms
        self.max_retries = max_retries
        self.backoff_base_s = backoff_base_s
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._semaphore = threading.BoundedSemaphore(concurrency)

    @property
    def embedder_id(self) -> str:
        return self.embedder.embedder_id

    def complete(self, request: CompletionRequest) -> CompletionResult:
        attempts = self.max_retries + 1
        last_exc: Optional[ProviderError] = None
        for attempt in range(attempts):
            started = time.monotonic()
            try:
                with self._semaphore:
                    reply = self.provider.complete_once(request, self.timeout_ms)
            except ProviderRejected as exc:
                self._audit(request, started, error=exc)
                raise
            except (ProviderTimeout, TransientProviderError) as exc:
                self._audit(request, started, error=exc)
                last_exc = exc
                if attempt < attempts - 1:
                    self._sleep(self._backoff(attempt))
                continue
            latency_ms = (time.monotonic() - started) * 1000.0
            result = self._finalize(request, reply, latency_ms)
            self._audit(request, started, result=result)
            return result
        raise RetriesExhausted(
            f"{attempts} attempts failed for tag {request.tag!r}"
        ) from last_exc

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        """Embed texts, retrying transient failures; output is unit-norm."""
        if not texts or any(not t for t in texts):
            raise ValueError("texts must be non-empty strings")
        attempts = self.max_retries + 1
        last_exc: Optional[ProviderError] = None
        for attempt in range(attempts):
            try:
                with self._semaphore:
                    vectors = self.embedder.embed_once(texts, self.timeout_ms)
            except ProviderRejected:
                raise
            except (ProviderTimeout, TransientProviderError) as exc:
                last_exc = exc
                if attempt < attempts - 1:
                    self._sleep(self._backoff(attempt))
                continue
            return [self._normalize(vec) for vec in vectors]
        raise RetriesExhausted(f"{attempts} embedding attempts failed") from last_exc

    # -- internals --

    @staticmethod
    def _normalize(vector: np.ndarray) -> np.ndarray:
        vec = np.asarray(vector, dtype=np.float64)
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            vec = np.zeros_like(vec)
            vec[0] = 1.0
            return vec
        return vec / norm

    def _backoff(self, attempt: int) -> float:
        # exponential with full jitter
        return self.backoff_base_s * (2 ** attempt) * self._rng.random()

    def _finalize(
        self, request: CompletionRequest, reply: ProviderReply, latency_ms: float
    ) -> CompletionResult:
        text = reply.text
        finish = reply.finish_reason
        limit = request.max_tokens * RUNAWAY_CHARS_PER_TOKEN
        if len(text) > limit:
            text = text[:limit]
            finish = FinishReason.Length
        if finish is FinishReason.Stop and not text:
            finish = FinishReason.Error
        prompt_tokens = reply.prompt_tokens
        if prompt_tokens is None:
            prompt_tokens = sum(token_count(m.content) for m in request.messages)
        completion_tokens = reply.completion_tokens
        if completion_tokens is None:
            completion_tokens = token_count(text)
        return CompletionResult(
            text=text,
            finish_reason=finish,
            usage=Usage(prompt_tokens, completion_tokens),
            provider_id=self.provider.provider_id,
            latency_ms=latency_ms,
        )

    def _audit(
        self,
        request: CompletionRequest,
        started: float,
        result: Optional[CompletionResult] = None,
        error: Optional[Exception] = None,
    ) -> None:
        if result is not None:
            response_digest = _text_digest(result.text)
            finish = result.finish_reason.value
            latency_ms = result.latency_ms
        else:
            response_digest = _text_digest(f"{type(error).__name__}: {error}")
            finish = FinishReason.Error.value
            latency_ms = (time.monotonic() - started) * 1000.0
        self.audit.record(
            {
                "ts": datetime.now(timezone.utc).isoformat(),
                "tag": request.tag,
                "model_id": request.model_id,
                "request_sha256": _request_digest(request),
                "response_sha256": response_digest,
                "finish_reason": finish,
                "latency_ms": round(latency_ms, 3),
            }
        )
