"""Chat-with-images backends.

``OpenAIBackend`` speaks the OpenAI-compatible ``/chat/completions`` wire
protocol; ``ScriptedBackend`` replays canned replies for tests; and
``RecordReplayBackend`` caches responses by request hash.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import httpx

from .errors import ChainViewError

log = logging.getLogger(__name__)


class BackendFailure(ChainViewError):
    pass


class AuthFailure(BackendFailure):
    pass


class RateLimited(BackendFailure):
    pass


class TransportFailure(BackendFailure):
    pass


class MalformedResponse(BackendFailure):
    pass


class ScriptExhausted(BackendFailure):
    pass


class CacheMiss(BackendFailure):
    pass


class TooManyImages(ChainViewError):
    pass


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    data: bytes
    media_type: str = "image/png"

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.data).hexdigest()

    def data_url(self) -> str:
        return f"data:{self.media_type};base64," + base64.b64encode(self.data).decode("ascii")


Part = Union[TextPart, ImagePart]


@dataclass(frozen=True)
class ChatMessage:
    role: str
    parts: tuple

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"bad role {self.role!r}")
        parts = tuple(self.parts)
        if not parts:
            raise ValueError("a message needs at least one part")
        object.__setattr__(self, "parts", parts)

    @classmethod
    def text(cls, role: str, text: str) -> "ChatMessage":
        return cls(role, (TextPart(text),))

    @property
    def text_content(self) -> str:
        return "\n".join(p.text for p in self.parts if isinstance(p, TextPart))

    @property
    def images(self) -> list[ImagePart]:
        return [p for p in self.parts if isinstance(p, ImagePart)]


def count_images(messages: Sequence[ChatMessage]) -> int:
    return sum(len(m.images) for m in messages)


def latest_user_text(messages: Sequence[ChatMessage]) -> str:
    for m in reversed(messages):
        if m.role == "user":
            return m.text_content
    return ""


def message_to_wire(m: ChatMessage) -> dict:
    if len(m.parts) == 1 and isinstance(m.parts[0], TextPart):
        return {"role": m.role, "content": m.parts[0].text}
    content = []
    for p in m.parts:
        if isinstance(p, TextPart):
            content.append({"type": "text", "text": p.text})
        else:
            content.append({"type": "image_url", "image_url": {"url": p.data_url()}})
    return {"role": m.role, "content": content}


def message_to_log(m: ChatMessage) -> dict:
    """Compact JSON form for transcripts: images become content hashes."""
    parts = []
    for p in m.parts:
        if isinstance(p, TextPart):
            parts.append({"text": p.text})
        else:
            parts.append({"image_sha256": p.digest, "media_type": p.media_type})
    return {"role": m.role, "parts": parts}


def request_hash(messages: Sequence[ChatMessage], model: str = "", temperature: float = 0.0) -> str:
    """Stable sha256 over the canonical request (independent of process / dict order)."""
    h = hashlib.sha256()
    h.update(json.dumps({"model": model, "temperature": temperature}, sort_keys=True).encode())
    for m in messages:
        h.update(b"\x00role:" + m.role.encode())
        for p in m.parts:
            if isinstance(p, TextPart):
                h.update(b"\x00text:" + p.text.encode("utf-8"))
            else:
                h.update(b"\x00image:" + p.media_type.encode() + b":" + p.digest.encode())
    return h.hexdigest()


@dataclass(frozen=True)
class BackendConfig:
    endpoint: str = "https://api.openai.com/v1"
    model_name: str = "gpt-4o-mini"
    temperature: float = 0.0
    max_output_tokens: int = 1024
    timeout_s: float = 120.0
    max_retries: int = 4
    api_key_env: str = "OPENAI_API_KEY"
    max_images: int = 64
    requests_per_minute: float = 0.0  # 0 disables the global limiter
    backoff_base_s: float = 1.0
    backoff_factor: float = 2.0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not self.timeout_s > 0:
            raise ValueError("timeout_s must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


class RateLimiter:
    """Serializes dispatch to at most ``rpm`` requests per minute."""

    def __init__(self, rpm: float, clock=time.monotonic, sleep=time.sleep):
        self.interval = 60.0 / rpm if rpm > 0 else 0.0
        self._next = 0.0
        self._lock = threading.Lock()
        self._clock = clock
        self._sleep = sleep

    def acquire(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = self._clock()
            wait = self._next - now
            if wait > 0:
                self._sleep(wait)
                now += wait
            self._next = now + self.interval


class Backend:
    """Interface: ``complete(messages) -> assistant text``."""

    name = "backend"
    model_name = ""
    temperature = 0.0

    def __init__(self):
        self.request_count = 0
        self._count_lock = threading.Lock()

    def _bump(self) -> None:
        with self._count_lock:
            self.request_count += 1

    def complete(self, messages: Sequence[ChatMessage]) -> str:
        raise NotImplementedError


def backoff_delays(config: BackendConfig, rng: random.Random) -> list[float]:
    """Delays before each retry: base * factor**i, stretched by up to 25% jitter.

    With factor >= 1.25 the sequence is non-decreasing whatever the jitter.
    """
    out = []
    for i in range(config.max_retries):
        base = config.backoff_base_s * config.backoff_factor ** i
        out.append(base * (1.0 + 0.25 * rng.random()))
    return out


_RETRYABLE = {429, 500, 502, 503, 504}


class OpenAIBackend(Backend):
    name = "openai"

    def __init__(self, config: BackendConfig, limiter: Optional[RateLimiter] = None,
                 sleep: Callable[[float], None] = time.sleep, seed: Optional[int] = None,
                 client: Optional[httpx.Client] = None):
        super().__init__()
        self.config = config
        self.model_name = config.model_name
        self.temperature = config.temperature
        self.limiter = limiter or RateLimiter(config.requests_per_minute)
        self._sleep = sleep
        self._rng = random.Random(seed)
        self._client = client or httpx.Client(timeout=config.timeout_s)
        self.delays: list[float] = []

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env) if self.config.api_key_env else None
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def payload(self, messages: Sequence[ChatMessage]) -> dict:
        return {
            "model": self.config.model_name,
            "messages": [message_to_wire(m) for m in messages],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_output_tokens,
        }

    def complete(self, messages: Sequence[ChatMessage]) -> str:
        if not messages:
            raise ValueError("messages must be non-empty")
        n_img = count_images(messages)
        if n_img > self.config.max_images:
            raise TooManyImages(f"{n_img} images exceed backend limit {self.config.max_images}")
        url = self.config.endpoint.rstrip("/") + "/chat/completions"
        body = json.dumps(self.payload(messages)).encode("utf-8")
        delays = backoff_delays(self.config, self._rng)
        attempt = 0
        while True:
            self.limiter.acquire()
            self._bump()
            try:
                resp = self._client.post(url, content=body, headers=self._headers())
            except httpx.TimeoutException as exc:
                err: BackendFailure = TransportFailure(f"timeout: {exc}")
            except httpx.HTTPError as exc:
                raise TransportFailure(f"{type(exc).__name__}: {exc}") from exc
            else:
                status = resp.status_code
                if status == 200:
                    return self._extract(resp)
                if status in (401, 403):
                    raise AuthFailure(f"HTTP {status}: {resp.text[:200]}")
                if status == 429:
                    err = RateLimited(f"HTTP 429 after {attempt} retries")
                elif status in _RETRYABLE:
                    err = TransportFailure(f"HTTP {status}: {resp.text[:200]}")
                else:
                    raise TransportFailure(f"HTTP {status}: {resp.text[:200]}")
            if attempt >= len(delays):
                raise err
            delay = delays[attempt]
            self.delays.append(delay)
            log.warning("retrying after %.2fs (%s)", delay, err)
            self._sleep(delay)
            attempt += 1

    @staticmethod
    def _extract(resp: httpx.Response) -> str:
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"unexpected response body: {resp.text[:200]}") from exc
        if isinstance(content, list):
            content = "".join(c.get("text", "") for c in content if isinstance(c, dict))
        if not isinstance(content, str):
            raise MalformedResponse("assistant content is not text")
        return content


@dataclass
class ScriptEntry:
    reply: str
    match: Optional[str] = None


def _entries(script) -> list[ScriptEntry]:
    out = []
    for item in script:
        if isinstance(item, ScriptEntry):
            out.append(item)
        elif isinstance(item, str):
            out.append(ScriptEntry(item))
        else:
            out.append(ScriptEntry(item["reply"], item.get("match")))
    return out


class ScriptedBackend(Backend):
    """Replays a fixed list of replies.

    Unkeyed entries are consumed in order. A keyed entry (``match``) is used
    only when its substring occurs in the latest user text; the first unused
    matching keyed entry wins, otherwise the next unkeyed entry is served.
    """

    name = "scripted"

    def __init__(self, script, model_name: str = "scripted"):
        super().__init__()
        self.entries = _entries(script)
        self._used = [False] * len(self.entries)
        self.model_name = model_name
        self.requests: list[list[ChatMessage]] = []
        self._lock = threading.Lock()

    def complete(self, messages: Sequence[ChatMessage]) -> str:
        if not messages:
            raise ValueError("messages must be non-empty")
        with self._lock:
            self._bump()
            self.requests.append(list(messages))
            latest = latest_user_text(messages)
            for i, e in enumerate(self.entries):
                if not self._used[i] and e.match is not None and e.match in latest:
                    self._used[i] = True
                    return e.reply
            for i, e in enumerate(self.entries):
                if not self._used[i] and e.match is None:
                    self._used[i] = True
                    return e.reply
        raise ScriptExhausted(f"script of {len(self.entries)} replies exhausted")


class FunctionBackend(Backend):
    """Backend driven by a plain function of the message list (for mocks)."""

    name = "function"

    def __init__(self, fn: Callable[[Sequence[ChatMessage]], str], model_name: str = "function"):
        super().__init__()
        self.fn = fn
        self.model_name = model_name
        self.requests: list[list[ChatMessage]] = []

    def complete(self, messages: Sequence[ChatMessage]) -> str:
        self._bump()
        self.requests.append(list(messages))
        return self.fn(messages)


class RecordReplayBackend(Backend):
    """Wraps a backend with a JSON-lines cache keyed by request hash.

    ``mode='record'`` forwards misses to ``inner`` and appends
    ``{hash, response, timestamp}``; ``mode='replay'`` never touches the
    network and raises :class:`CacheMiss` for unknown requests.
    """

    name = "record-replay"

    def __init__(self, session_path, mode: str = "replay", inner: Optional[Backend] = None,
                 model_name: Optional[str] = None, temperature: Optional[float] = None):
        super().__init__()
        if mode not in ("record", "replay"):
            raise ValueError("mode must be 'record' or 'replay'")
        if mode == "record" and inner is None:
            raise ValueError("record mode needs an inner backend")
        self.path = Path(session_path)
        self.mode = mode
        self.inner = inner
        self.cache: dict[str, str] = {}
        self.network_calls = 0
        self._lock = threading.Lock()
        recorded_model, recorded_temp = None, None
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    rec = json.loads(line)
                    self.cache[rec["hash"]] = rec["response"]
                    recorded_model = rec.get("model", recorded_model)
                    recorded_temp = rec.get("temperature", recorded_temp)
        # hashes include model and temperature; replay falls back to what the session recorded
        if model_name is None:
            model_name = getattr(inner, "model_name", None) or recorded_model or ""
        if temperature is None:
            temperature = getattr(inner, "temperature", None)
            temperature = recorded_temp if temperature is None else temperature
        self.model_name = model_name
        self.temperature = 0.0 if temperature is None else temperature

    def complete(self, messages: Sequence[ChatMessage]) -> str:
        self._bump()
        key = request_hash(messages, self.model_name, self.temperature)
        with self._lock:
            if key in self.cache:
                return self.cache[key]
        if self.mode == "replay":
            raise CacheMiss(f"no cached response for request {key[:12]}")
        self.network_calls += 1
        response = self.inner.complete(messages)
        with self._lock:
            self.cache[key] = response
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps({"hash": key, "response": response,
                                    "timestamp": time.time(), "model": self.model_name,
                                    "temperature": self.temperature}) + "\n")
        return response


def record_and_replay(session_path, inner: Optional[Backend] = None) -> RecordReplayBackend:
    """Replay from ``session_path`` when no inner backend is given, else record."""
    mode = "record" if inner is not None else "replay"
    return RecordReplayBackend(session_path, mode=mode, inner=inner)
