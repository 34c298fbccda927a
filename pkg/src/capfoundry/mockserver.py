"""Deterministic in-process mock backend speaking the gateway wire protocol.

Used three ways: as an httpx transport injected into a Gateway (tests, CLI
--mock runs), as a scriptable failure source for retry tests, and as an ASGI
app served by uvicorn for end-to-end demos. Responses are pure functions of
the request bytes, so any run against the mock is reproducible.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import httpx


def _digest8(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:8]


def default_chat_text(model: str, system: str, user: str, image_b64: Optional[str]) -> str:
    """Deterministic pseudo-caption: stable words keyed by request content."""
    seed = hashlib.sha256(
        f"{model}\x00{system}\x00{user}\x00{image_b64 or ''}".encode("utf-8")
    ).digest()
    vocab = (
        "amber harbor violet meadow copper lantern quiet summit velvet orchard "
        "silver canyon golden thicket marble prairie crimson valley bright delta"
    ).split()
    words = [vocab[b % len(vocab)] for b in seed[:12]]
    tag = _digest8(seed)
    return f"mock caption {tag}: " + " ".join(words) + "."


def default_embedding(payload_text: str, dim: int = 8) -> list[float]:
    """Deterministic non-zero vector derived from the input bytes."""
    digest = hashlib.sha256(payload_text.encode("utf-8")).digest()
    vector = [(digest[i % len(digest)] - 127.5) / 127.5 for i in range(dim)]
    if all(abs(x) < 1e-9 for x in vector):
        vector[0] = 1.0
    return vector


@dataclass
class _Script:
    """Queued one-shot behaviors, consumed before the default handler."""
    status: int
    body: Optional[dict] = None


@dataclass
class MockBackend:
    """Thread-safe; counts calls and tracks peak concurrent requests."""

    chat_fn: Callable[[str, str, str, Optional[str]], str] = default_chat_text
    embed_dim: int = 8
    handler_delay_seconds: float = 0.0
    calls: int = 0
    max_concurrent: int = 0
    transcript: list[dict] = field(default_factory=list)
    _scripts: list[_Script] = field(default_factory=list)
    _active: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def script_failures(self, status: int, times: int) -> None:
        """Queue `times` responses with the given status before normal service."""
        for _ in range(times):
            self._scripts.append(_Script(status=status))

    def script_response(self, body: dict, status: int = 200) -> None:
        self._scripts.append(_Script(status=status, body=body))

    def _enter(self) -> None:
        with self._lock:
            self.calls += 1
            self._active += 1
            self.max_concurrent = max(self.max_concurrent, self._active)

    def _exit(self) -> None:
        with self._lock:
            self._active -= 1

    def handle(self, method: str, path: str, body: dict) -> tuple[int, dict]:
        self._enter()
        try:
            if self.handler_delay_seconds:
                time.sleep(self.handler_delay_seconds)
            with self._lock:
                self.transcript.append({"path": path, "body": body})
                script = self._scripts.pop(0) if self._scripts else None
            if script is not None:
                if script.body is not None:
                    return script.status, script.body
                return script.status, {"error": f"scripted {script.status}"}
            if path.endswith("/chat/completions"):
                return 200, self._chat(body)
            if path.endswith("/embeddings"):
                return 200, self._embed(body)
            return 404, {"error": f"no route {path}"}
        finally:
            self._exit()

    def _chat(self, body: dict) -> dict:
        model = body.get("model", "")
        system = ""
        user_text = ""
        image_b64 = None
        for message in body.get("messages", []):
            if message["role"] == "system":
                system = message["content"]
            elif message["role"] == "user":
                content = message["content"]
                if isinstance(content, str):
                    user_text = content
                else:
                    for part in content:
                        if part.get("type") == "text":
                            user_text += part["text"]
                        elif part.get("type") == "image_url":
                            image_b64 = part["image_url"]["url"]
        text = self.chat_fn(model, system, user_text, image_b64)
        completion_tokens = max(1, len(text.split()))
        max_tokens = body.get("max_tokens")
        if max_tokens is not None:
            words = text.split()
            if len(words) > max_tokens:
                text = " ".join(words[:max_tokens])
            completion_tokens = min(completion_tokens, int(max_tokens))
        return {
            "choices": [{"message": {"role": "assistant", "content": text}}],
            "usage": {
                "prompt_tokens": max(1, len(user_text.split())),
                "completion_tokens": completion_tokens,
            },
        }

    def _embed(self, body: dict) -> dict:
        text = body.get("input") or body.get("input_image") or ""
        return {"data": [{"embedding": default_embedding(text, self.embed_dim)}]}

    # -- integration points --

    def as_transport(self) -> httpx.MockTransport:
        def handler(request: httpx.Request) -> httpx.Response:
            body = json.loads(request.content.decode("utf-8")) if request.content else {}
            status, payload = self.handle(request.method, request.url.path, body)
            return httpx.Response(status, json=payload)

        return httpx.MockTransport(handler)

    def build_asgi_app(self):
        """Minimal ASGI app for uvicorn-backed demos; same handler."""
        backend = self

        async def app(scope, receive, send):
            assert scope["type"] == "http"
            chunks = []
            while True:
                event = await receive()
                chunks.append(event.get("body", b""))
                if not event.get("more_body"):
                    break
            raw = b"".join(chunks)
            body = json.loads(raw.decode("utf-8")) if raw else {}
            status, payload = backend.handle(scope["method"], scope["path"], body)
            data = json.dumps(payload).encode("utf-8")
            await send({
                "type": "http.response.start",
                "status": status,
                "headers": [(b"content-type", b"application/json")],
            })
            await send({"type": "http.response.body", "body": data})

        return app
