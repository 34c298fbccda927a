"""Uniform client over chat-completion and embedding backends.

One Gateway instance serves all bindings. Per binding it enforces a
max_in_flight semaphore and an optional sliding-window requests-per-minute
limit; every successful response is cached content-addressed on disk so a
rerun with a warm cache touches the network zero times.

The wire protocol is HTTP chat completion: JSON body with model and messages,
message content as a list of text and base64 data-URI image parts. Clock and
transport are injectable so retry, rate-limit, and concurrency behavior is
testable without wall time or sockets.
"""

from __future__ import annotations

import base64
import json
import os
import random
import tempfile
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import httpx

from capfoundry.records import canonical_digest, content_digest


class GatewayError(Exception):
    pass


class BackendUnavailable(GatewayError):
    """Retries exhausted against 429/5xx/transport failures."""


class BackendRefusal(GatewayError):
    """Non-retryable 4xx: the request itself was rejected."""


class EmptyCompletion(GatewayError):
    """Success status but empty completion text; surfaced, never retried."""


class RetriesExhausted(GatewayError):
    pass


class DimensionMismatch(GatewayError):
    """Embedding dimension changed mid-run, or a degenerate zero vector."""


class UnsupportedImage(GatewayError):
    pass


@dataclass(frozen=True)
class BackendBinding:
    name: str
    base_url: str
    model: str
    api_key_env: str = ""
    max_in_flight: int = 8
    requests_per_minute: Optional[int] = None
    timeout_seconds: int = 120

    def __post_init__(self) -> None:
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if not (self.base_url.startswith("http://") or self.base_url.startswith("https://")):
            raise ValueError(f"base_url must be absolute: {self.base_url!r}")

    @classmethod
    def from_json_dict(cls, obj: dict) -> "BackendBinding":
        return cls(
            name=obj["name"],
            base_url=obj["base_url"],
            model=obj["model"],
            api_key_env=obj.get("api_key_env", ""),
            max_in_flight=int(obj.get("max_in_flight", 8)),
            requests_per_minute=obj.get("requests_per_minute"),
            timeout_seconds=int(obj.get("timeout_seconds", 120)),
        )


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass(frozen=True)
class ChatResponse:
    text: str
    usage: Usage
    backend_latency_ms: float
    from_cache: bool = False


MAX_IMAGE_PARTS = 8
MAX_RETRIES = 5
BACKOFF_BASE_SECONDS = 1.0
BACKOFF_CAP_SECONDS = 60.0

# Embedding cache entries share the chat cache keyspace; this sentinel keeps
# them from colliding with any real system prompt.
_EMBED_SENTINEL = "\x00embed"


def cache_key(model: str, system: Optional[str], user: str, image_digest: Optional[str] = None) -> str:
    """Stable content address for one backend call."""
    return canonical_digest([model, system, user, image_digest])


def next_retry_delay(attempt: int, rng: random.Random, max_retries: int = MAX_RETRIES) -> float:
    """Full-jitter exponential backoff: uniform in [0, min(cap, base*2^(n-1))]."""
    if attempt < 1:
        raise ValueError("attempt counts from 1")
    if attempt > max_retries:
        raise RetriesExhausted(f"attempt {attempt} > max_retries {max_retries}")
    ceiling = min(BACKOFF_CAP_SECONDS, BACKOFF_BASE_SECONDS * (2 ** (attempt - 1)))
    return rng.uniform(0.0, ceiling)


def sniff_media_type(image: bytes) -> str:
    if image.startswith(b"\x89PNG\r\n\x1a\n"):
        return "image/png"
    if image.startswith(b"\xff\xd8\xff"):
        return "image/jpeg"
    head = image[:512].lstrip()
    if head.startswith(b"<?xml") or head.startswith(b"<svg"):
        return "image/svg+xml"
    raise UnsupportedImage("image is not PNG, JPEG, or SVG")


class _SlidingWindowLimiter:
    """At most `limit` departures in any 60s window, measured on the
    injected clock."""

    def __init__(self, limit: int, clock: Callable[[], float], sleep: Callable[[float], None]):
        self._limit = limit
        self._clock = clock
        self._sleep = sleep
        self._departures: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                while self._departures and now - self._departures[0] >= 60.0:
                    self._departures.popleft()
                if len(self._departures) < self._limit:
                    self._departures.append(now)
                    return
                wait = 60.0 - (now - self._departures[0])
            self._sleep(max(wait, 1e-3))


@dataclass
class _BindingState:
    semaphore: threading.Semaphore
    limiter: Optional[_SlidingWindowLimiter]
    embed_dim: Optional[int] = None
    lock: threading.Lock = field(default_factory=threading.Lock)


class Gateway:
    """Shareable across worker threads; all mutable state is per-binding and
    lock-protected. Cache writes go through write-temp-then-rename so a
    concurrent reader never sees a torn file.
    """

    def __init__(
        self,
        cache_dir: str | Path,
        transport: Optional[httpx.BaseTransport] = None,
        clock: Optional[Callable[[], float]] = None,
        sleep: Optional[Callable[[float], None]] = None,
        rng: Optional[random.Random] = None,
        audit_path: Optional[str | Path] = None,
        max_retries: int = MAX_RETRIES,
    ):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._client = httpx.Client(transport=transport) if transport is not None else httpx.Client()
        self._clock = clock if clock is not None else time.monotonic
        self._sleep = sleep if sleep is not None else time.sleep
        self._rng = rng if rng is not None else random.Random()
        self._audit_path = Path(audit_path) if audit_path is not None else None
        self._max_retries = max_retries
        self._states: dict[str, _BindingState] = {}
        self._states_lock = threading.Lock()
        self._audit_lock = threading.Lock()
        self.network_calls = 0  # informational; bumped under _states_lock

    def close(self) -> None:
        self._client.close()

    # -- cache --

    def _cache_path(self, key: str) -> Path:
        return self.cache_dir / key[:2] / f"{key}.json"

    def _cache_read(self, key: str) -> Optional[dict]:
        path = self._cache_path(key)
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None
        except json.JSONDecodeError:
            return None  # torn/corrupt entry treated as a miss and rewritten

    def _cache_write(self, key: str, payload: dict) -> None:
        path = self._cache_path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(payload, fh, ensure_ascii=False)
            os.replace(tmp, path)
        except BaseException:
            try:
                os.unlink(tmp)
            except OSError:
                pass
            raise

    # -- binding state --

    def _state(self, binding: BackendBinding) -> _BindingState:
        with self._states_lock:
            state = self._states.get(binding.name)
            if state is None:
                limiter = None
                if binding.requests_per_minute is not None:
                    limiter = _SlidingWindowLimiter(binding.requests_per_minute, self._clock, self._sleep)
                state = _BindingState(threading.Semaphore(binding.max_in_flight), limiter)
                self._states[binding.name] = state
        return state

    def _audit(self, record: dict) -> None:
        if self._audit_path is None:
            return
        with self._audit_lock:
            with open(self._audit_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, ensure_ascii=False) + "\n")

    # -- HTTP --

    def _headers(self, binding: BackendBinding) -> dict:
        headers = {"Content-Type": "application/json"}
        if binding.api_key_env:
            key = os.environ.get(binding.api_key_env, "")
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post_with_retry(self, binding: BackendBinding, endpoint: str, body: dict) -> dict:
        state = self._state(binding)
        url = binding.base_url.rstrip("/") + endpoint
        attempt = 0
        last_error: Optional[str] = None
        with state.semaphore:
            while attempt < self._max_retries:
                attempt += 1
                if state.limiter is not None:
                    state.limiter.acquire()
                started = self._clock()
                try:
                    with self._states_lock:
                        self.network_calls += 1
                    response = self._client.post(
                        url, json=body, headers=self._headers(binding),
                        timeout=binding.timeout_seconds,
                    )
                except httpx.HTTPError as exc:
                    last_error = f"transport: {exc}"
                else:
                    if response.status_code == 200:
                        payload = response.json()
                        payload["_latency_ms"] = (self._clock() - started) * 1000.0
                        self._audit({"binding": binding.name, "endpoint": endpoint,
                                     "request": body, "response": payload})
                        return payload
                    if response.status_code == 429 or response.status_code >= 500:
                        last_error = f"HTTP {response.status_code}"
                    else:
                        raise BackendRefusal(
                            f"{binding.name}: HTTP {response.status_code}: {response.text[:200]}"
                        )
                if attempt < self._max_retries:
                    self._sleep(next_retry_delay(attempt, self._rng, self._max_retries))
        raise BackendUnavailable(f"{binding.name}: {last_error} after {attempt} attempts")

    # -- chat bodies --

    @staticmethod
    def _chat_body(
        model: str,
        system: Optional[str],
        user_parts: Sequence[dict],
        temperature: float,
        max_output_tokens: Optional[int],
    ) -> dict:
        messages = []
        if system is not None:
            messages.append({"role": "system", "content": system})
        messages.append({"role": "user", "content": list(user_parts)})
        body = {"model": model, "messages": messages, "temperature": temperature}
        if max_output_tokens is not None:
            body["max_tokens"] = max_output_tokens
        return body

    @staticmethod
    def _parse_chat(payload: dict) -> tuple[str, Usage]:
        try:
            text = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendRefusal(f"malformed chat response: {exc}") from exc
        usage = payload.get("usage") or {}
        return text, Usage(
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
        )

    def _chat(
        self,
        binding: BackendBinding,
        system: Optional[str],
        user: str,
        image: Optional[bytes],
        temperature: float,
        max_output_tokens: Optional[int],
    ) -> ChatResponse:
        image_digest = content_digest(image) if image is not None else None
        key = cache_key(binding.model, system, user, image_digest)
        cached = self._cache_read(key)
        if cached is not None:
            return ChatResponse(
                text=cached["text"],
                usage=Usage(**cached["usage"]),
                backend_latency_ms=cached["latency_ms"],
                from_cache=True,
            )
        parts: list[dict] = [{"type": "text", "text": user}]
        if image is not None:
            media = sniff_media_type(image)
            data_uri = f"data:{media};base64,{base64.b64encode(image).decode('ascii')}"
            parts.append({"type": "image_url", "image_url": {"url": data_uri}})
        n_images = sum(1 for p in parts if p["type"] == "image_url")
        if n_images > MAX_IMAGE_PARTS:
            raise BackendRefusal(f"{n_images} image parts exceeds limit {MAX_IMAGE_PARTS}")
        payload = self._post_with_retry(
            binding, "/chat/completions",
            self._chat_body(binding.model, system, parts, temperature, max_output_tokens),
        )
        text, usage = self._parse_chat(payload)
        if not text:
            raise EmptyCompletion(f"{binding.name}: empty completion for cache key {key}")
        latency = float(payload.get("_latency_ms", 0.0))
        self._cache_write(key, {
            "text": text,
            "usage": {"prompt_tokens": usage.prompt_tokens, "completion_tokens": usage.completion_tokens},
            "latency_ms": latency,
        })
        return ChatResponse(text=text, usage=usage, backend_latency_ms=latency)

    # -- public operations --

    def caption_image(
        self,
        binding: BackendBinding,
        system: str,
        user: str,
        image: bytes,
        temperature: float = 0.2,
        max_output_tokens: Optional[int] = None,
    ) -> ChatResponse:
        if not system or not user:
            raise ValueError("prompts must be non-empty")
        sniff_media_type(image)  # reject junk before any network attempt
        return self._chat(binding, system, user, image, temperature, max_output_tokens)

    def complete_text(
        self,
        binding: BackendBinding,
        system: Optional[str],
        user: str,
        temperature: float = 0.0,
        max_output_tokens: Optional[int] = None,
    ) -> ChatResponse:
        if not user:
            raise ValueError("user prompt must be non-empty")
        return self._chat(binding, system, user, None, temperature, max_output_tokens)

    def embed(self, binding: BackendBinding, text: Optional[str] = None, image: Optional[bytes] = None) -> list[float]:
        if (text is None) == (image is None):
            raise ValueError("embed takes exactly one of text or image")
        if text is not None and not text:
            raise ValueError("embed input must be non-empty")
        if image is not None:
            sniff_media_type(image)
        image_digest = content_digest(image) if image is not None else None
        key = cache_key(binding.model, _EMBED_SENTINEL, text or "", image_digest)
        cached = self._cache_read(key)
        if cached is not None:
            vector = cached["vector"]
        else:
            body: dict = {"model": binding.model}
            if text is not None:
                body["input"] = text
            else:
                media = sniff_media_type(image)  # type: ignore[arg-type]
                body["input_image"] = f"data:{media};base64,{base64.b64encode(image).decode('ascii')}"  # type: ignore[arg-type]
            payload = self._post_with_retry(binding, "/embeddings", body)
            try:
                vector = payload["data"][0]["embedding"]
            except (KeyError, IndexError, TypeError) as exc:
                raise BackendRefusal(f"malformed embedding response: {exc}") from exc
            self._cache_write(key, {"vector": vector})
        vector = [float(x) for x in vector]
        if not vector or all(x == 0.0 for x in vector):
            raise DimensionMismatch(f"{binding.name}: degenerate embedding")
        state = self._state(binding)
        with state.lock:
            if state.embed_dim is None:
                state.embed_dim = len(vector)
            elif state.embed_dim != len(vector):
                raise DimensionMismatch(
                    f"{binding.name}: dimension changed {state.embed_dim} -> {len(vector)}"
                )
        return vector


def load_bindings(path: str | Path) -> dict[str, BackendBinding]:
    """Config file: {"bindings": [ {name, base_url, model, ...} ]}."""
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    bindings = {}
    for entry in obj["bindings"]:
        binding = BackendBinding.from_json_dict(entry)
        if binding.name in bindings:
            raise ValueError(f"duplicate binding name {binding.name!r}")
        bindings[binding.name] = binding
    return bindings
