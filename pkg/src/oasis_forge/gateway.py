"""Uniform client for OpenAI-compatible endpoints.

Two request modes: ``chat`` (messages with text and image parts) and
``raw_completion`` (a pre-rendered prompt string, used for prefill hooking).
Retries, bounded per-endpoint concurrency, and token accounting live here so
every pipeline stage shares one behavior.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Protocol
from urllib.parse import urlparse

import httpx

from .errors import (
    AuthError,
    BadRequestError,
    ImageUnreadable,
    LogprobsUnavailable,
    NetworkError,
    SchemaError,
)

MAX_RETRIES_CEILING = 10

CHAT = "chat"
RAW_COMPLETION = "raw_completion"

FINISH_STOP = "stop"
FINISH_LENGTH = "length"
FINISH_ERROR = "error"


@dataclass(frozen=True)
class EndpointConfig:
    """One inference endpoint plus the retry/concurrency policy for it.

    ``name`` distinguishes roles that share a physical endpoint so token
    accounting stays per-role.
    """

    base_url: str
    model_name: str
    credential_env: str = ""
    timeout: float = 120.0
    max_retries: int = 3
    backoff_base: float = 0.5
    max_concurrency: int = 8
    request_mode: str = CHAT
    name: str = ""

    def __post_init__(self) -> None:
        parsed = urlparse(self.base_url)
        if not parsed.scheme:
            raise ValueError(f"base_url must be absolute, got {self.base_url!r}")
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if not (0 <= self.max_retries <= MAX_RETRIES_CEILING):
            raise ValueError(f"max_retries must be in [0, {MAX_RETRIES_CEILING}]")
        if self.backoff_base < 0:
            raise ValueError("backoff_base must be >= 0")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        if self.request_mode not in (CHAT, RAW_COMPLETION):
            raise ValueError(f"unknown request_mode {self.request_mode!r}")

    def with_mode(self, mode: str) -> "EndpointConfig":
        return replace(self, request_mode=mode)


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 1.0
    top_p: float = 0.9
    max_new_tokens: int = 1024
    n_samples: int = 1
    want_logprobs: bool = False
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not (0 < self.top_p <= 1):
            raise ValueError("top_p must be in (0, 1]")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


# Hooked generation needs diversity, judging needs determinism; both are
# overridable per run config.
GENERATION_SAMPLING = SamplingParams(temperature=1.0, top_p=0.9, max_new_tokens=1024)
JUDGE_SAMPLING = SamplingParams(temperature=0.0, top_p=1.0, max_new_tokens=512)


@dataclass(frozen=True)
class ModelRequest:
    """A single call: chat messages or a raw prompt, plus ordered images.

    Chat payload is a message list; each message content is a string or a
    list of parts ``{"type": "text", ...}`` / ``{"type": "image"}``. Image
    parts consume ``images`` entries in order, so the part count must equal
    the image count. Raw payloads carry ``image_placeholder`` occurrences
    instead (one per image) when images ride along.
    """

    mode: str
    payload: Any
    images: tuple[str | bytes, ...] = ()
    image_placeholder: str | None = None

    def __post_init__(self) -> None:
        if self.mode == RAW_COMPLETION:
            if not isinstance(self.payload, str) or not self.payload:
                raise ValueError("raw_completion payload must be a nonempty string")
            if self.images:
                if self.image_placeholder is None:
                    raise ValueError("raw_completion with images needs image_placeholder")
                found = self.payload.count(self.image_placeholder)
                if found != len(self.images):
                    raise ValueError(
                        f"payload has {found} image placeholders for {len(self.images)} images"
                    )
        elif self.mode == CHAT:
            if not isinstance(self.payload, (list, tuple)) or not self.payload:
                raise ValueError("chat payload must be a nonempty message list")
            slots = sum(
                1
                for message in self.payload
                for part in _message_parts(message)
                if part.get("type") == "image"
            )
            if slots != len(self.images):
                raise ValueError(f"payload has {slots} image parts for {len(self.images)} images")
        else:
            raise ValueError(f"unknown request mode {self.mode!r}")


@dataclass(frozen=True)
class ModelResponse:
    text: str
    finish_reason: str = FINISH_STOP
    token_logprobs: tuple[tuple[str, float], ...] | None = None
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self) -> None:
        if self.token_logprobs is not None:
            if len(self.token_logprobs) == 0:
                raise ValueError("token_logprobs, when present, must be nonempty")
            for _, logprob in self.token_logprobs:
                if logprob > 0:
                    raise ValueError(f"logprob {logprob} > 0")
        if self.finish_reason not in (FINISH_STOP, FINISH_LENGTH, FINISH_ERROR):
            raise ValueError(f"unknown finish_reason {self.finish_reason!r}")


def user_chat_message(text: str, n_images: int = 0) -> dict[str, Any]:
    """Single user turn with the images placed before the text."""
    parts: list[dict[str, Any]] = [{"type": "image"} for _ in range(n_images)]
    parts.append({"type": "text", "text": text})
    return {"role": "user", "content": parts}


def _message_parts(message: dict[str, Any]) -> list[dict[str, Any]]:
    content = message.get("content", "")
    if isinstance(content, str):
        return [{"type": "text", "text": content}]
    return list(content)


def load_image_bytes(ref: str | bytes | Path) -> bytes:
    if isinstance(ref, bytes):
        return ref
    try:
        return Path(ref).read_bytes()
    except OSError as exc:
        raise ImageUnreadable(f"cannot read image {ref!r}: {exc}") from exc


def _canonical_payload(request: ModelRequest) -> Any:
    if request.mode == RAW_COMPLETION:
        return request.payload
    canon = []
    for message in request.payload:
        parts = []
        for part in _message_parts(message):
            if part.get("type") == "image":
                parts.append("<image-slot>")
            else:
                parts.append(part.get("text", ""))
        canon.append([message.get("role", ""), parts])
    return canon


def request_fingerprint(
    request: ModelRequest,
    sampling: SamplingParams,
    image_bytes: list[bytes] | None = None,
) -> str:
    """Stable hash of (mode, payload text, image content hashes, sampling).

    The seed is excluded so scripted backends key on semantic content, not on
    replay bookkeeping.
    """
    if image_bytes is None:
        image_bytes = [load_image_bytes(ref) for ref in request.images]
    blob = json.dumps(
        {
            "mode": request.mode,
            "payload": _canonical_payload(request),
            "images": [hashlib.sha256(b).hexdigest() for b in image_bytes],
            "sampling": {
                "temperature": sampling.temperature,
                "top_p": sampling.top_p,
                "max_new_tokens": sampling.max_new_tokens,
                "n_samples": sampling.n_samples,
                "want_logprobs": sampling.want_logprobs,
            },
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class Backend(Protocol):
    """Transport that answers one call with ``sampling.n_samples`` responses."""

    def complete(
        self,
        endpoint: EndpointConfig,
        request: ModelRequest,
        sampling: SamplingParams,
        image_bytes: list[bytes],
    ) -> list[ModelResponse]: ...


@dataclass
class TokenUsage:
    requests: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0


class Gateway:
    """Shared, thread-safe entry point for all model calls.

    One instance may serve any number of concurrent pipeline workers; the
    per-endpoint semaphore bounds outstanding requests and retries happen
    inside the semaphore so a retrying call still counts against the limit.
    """

    def __init__(self, backend: Backend, sleep: Callable[[float], None] = time.sleep) -> None:
        self._backend = backend
        self._sleep = sleep
        self._lock = threading.Lock()
        self._semaphores: dict[EndpointConfig, threading.BoundedSemaphore] = {}
        self._usage: dict[EndpointConfig, TokenUsage] = {}

    def _semaphore(self, endpoint: EndpointConfig) -> threading.BoundedSemaphore:
        with self._lock:
            sem = self._semaphores.get(endpoint)
            if sem is None:
                sem = threading.BoundedSemaphore(endpoint.max_concurrency)
                self._semaphores[endpoint] = sem
            return sem

    def usage(self, endpoint: EndpointConfig) -> TokenUsage:
        with self._lock:
            return self._usage.get(endpoint, TokenUsage())

    def _record_usage(self, endpoint: EndpointConfig, responses: list[ModelResponse]) -> None:
        with self._lock:
            usage = self._usage.setdefault(endpoint, TokenUsage())
            usage.requests += 1
            for response in responses:
                usage.prompt_tokens += response.prompt_tokens
                usage.completion_tokens += response.completion_tokens

    def send(
        self,
        endpoint: EndpointConfig,
        request: ModelRequest,
        sampling: SamplingParams,
    ) -> list[ModelResponse]:
        """Send one request, returning exactly ``sampling.n_samples`` responses."""
        if request.mode != endpoint.request_mode:
            raise ValueError(
                f"request mode {request.mode!r} incompatible with endpoint "
                f"mode {endpoint.request_mode!r}"
            )
        image_bytes = [load_image_bytes(ref) for ref in request.images]

        semaphore = self._semaphore(endpoint)
        with semaphore:
            last_error: Exception | None = None
            for attempt in range(endpoint.max_retries + 1):
                if attempt > 0:
                    self._sleep(endpoint.backoff_base * (2 ** (attempt - 1)))
                try:
                    responses = self._backend.complete(endpoint, request, sampling, image_bytes)
                except NetworkError as exc:
                    last_error = exc
                    continue
                if len(responses) != sampling.n_samples:
                    raise SchemaError(
                        f"backend returned {len(responses)} responses, "
                        f"expected {sampling.n_samples}"
                    )
                if sampling.want_logprobs:
                    for response in responses:
                        if response.token_logprobs is None:
                            raise LogprobsUnavailable(
                                "logprobs requested but backend returned none"
                            )
                self._record_usage(endpoint, responses)
                return responses
            raise NetworkError(
                f"retries exhausted after {endpoint.max_retries + 1} attempts: {last_error}"
            )


def _image_data_url(data: bytes) -> str:
    mime = "image/png" if data[:8] == b"\x89PNG\r\n\x1a\n" else (
        "image/jpeg" if data[:2] == b"\xff\xd8" else "application/octet-stream"
    )
    return f"data:{mime};base64,{base64.b64encode(data).decode('ascii')}"


class HttpBackend:
    """OpenAI-compatible HTTP transport (chat and text completions routes)."""

    def __init__(self, transport: httpx.BaseTransport | None = None) -> None:
        self._transport = transport
        self._lock = threading.Lock()
        self._clients: dict[float, httpx.Client] = {}

    def _client(self, timeout: float) -> httpx.Client:
        with self._lock:
            client = self._clients.get(timeout)
            if client is None:
                client = httpx.Client(timeout=timeout, transport=self._transport)
                self._clients[timeout] = client
            return client

    def _headers(self, endpoint: EndpointConfig) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if endpoint.credential_env:
            key = os.environ.get(endpoint.credential_env, "")
            if not key:
                raise AuthError(f"environment variable {endpoint.credential_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(
        self,
        endpoint: EndpointConfig,
        request: ModelRequest,
        sampling: SamplingParams,
        image_bytes: list[bytes],
    ) -> list[ModelResponse]:
        if request.mode == CHAT:
            route = "/chat/completions"
            body = self._chat_body(endpoint, request, sampling, image_bytes)
        else:
            route = "/completions"
            body = self._completion_body(endpoint, request, sampling, image_bytes)
        url = endpoint.base_url.rstrip("/") + route

        try:
            http_response = self._client(endpoint.timeout).post(
                url, headers=self._headers(endpoint), json=body
            )
        except httpx.HTTPError as exc:
            raise NetworkError(f"{type(exc).__name__}: {exc}") from exc

        status = http_response.status_code
        if status in (401, 403):
            raise AuthError(f"endpoint returned {status}")
        if status == 429 or status >= 500:
            raise NetworkError(f"endpoint returned {status}")
        if status >= 400:
            raise BadRequestError(f"endpoint returned {status}: {http_response.text[:500]}")

        try:
            data = http_response.json()
            return (self._parse_chat if request.mode == CHAT else self._parse_completion)(data)
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"unparsable response body: {exc}") from exc

    def _common_body(self, endpoint: EndpointConfig, sampling: SamplingParams) -> dict[str, Any]:
        body: dict[str, Any] = {
            "model": endpoint.model_name,
            "temperature": sampling.temperature,
            "top_p": sampling.top_p,
            "max_tokens": sampling.max_new_tokens,
            "n": sampling.n_samples,
        }
        if sampling.seed is not None:
            body["seed"] = sampling.seed
        return body

    def _chat_body(
        self,
        endpoint: EndpointConfig,
        request: ModelRequest,
        sampling: SamplingParams,
        image_bytes: list[bytes],
    ) -> dict[str, Any]:
        body = self._common_body(endpoint, sampling)
        image_iter = iter(image_bytes)
        messages = []
        for message in request.payload:
            parts = []
            for part in _message_parts(message):
                if part.get("type") == "image":
                    parts.append(
                        {"type": "image_url", "image_url": {"url": _image_data_url(next(image_iter))}}
                    )
                else:
                    parts.append({"type": "text", "text": part.get("text", "")})
            messages.append({"role": message.get("role", "user"), "content": parts})
        body["messages"] = messages
        if sampling.want_logprobs:
            body["logprobs"] = True
        return body

    def _completion_body(
        self,
        endpoint: EndpointConfig,
        request: ModelRequest,
        sampling: SamplingParams,
        image_bytes: list[bytes],
    ) -> dict[str, Any]:
        body = self._common_body(endpoint, sampling)
        body["prompt"] = request.payload
        if image_bytes:
            # Extension understood by multimodal completion servers: data URLs
            # matching the placeholder occurrences in the prompt, in order.
            body["images"] = [_image_data_url(data) for data in image_bytes]
        if sampling.want_logprobs:
            body["logprobs"] = 1
        return body

    @staticmethod
    def _finish(reason: Any) -> str:
        if reason == "stop":
            return FINISH_STOP
        if reason == "length":
            return FINISH_LENGTH
        return FINISH_ERROR

    def _parse_chat(self, data: dict[str, Any]) -> list[ModelResponse]:
        usage = data.get("usage") or {}
        responses = []
        for choice in data["choices"]:
            logprobs = None
            raw = (choice.get("logprobs") or {}).get("content")
            if raw:
                logprobs = tuple((item["token"], float(item["logprob"])) for item in raw)
            responses.append(
                ModelResponse(
                    text=choice["message"]["content"] or "",
                    finish_reason=self._finish(choice.get("finish_reason")),
                    token_logprobs=logprobs,
                    prompt_tokens=int(usage.get("prompt_tokens", 0)),
                    completion_tokens=int(usage.get("completion_tokens", 0)),
                )
            )
        return responses

    def _parse_completion(self, data: dict[str, Any]) -> list[ModelResponse]:
        usage = data.get("usage") or {}
        responses = []
        for choice in data["choices"]:
            logprobs = None
            raw = choice.get("logprobs") or {}
            if raw.get("tokens") and raw.get("token_logprobs"):
                logprobs = tuple(
                    (token, float(lp))
                    for token, lp in zip(raw["tokens"], raw["token_logprobs"])
                    if lp is not None
                )
                logprobs = logprobs or None
            responses.append(
                ModelResponse(
                    text=choice["text"] or "",
                    finish_reason=self._finish(choice.get("finish_reason")),
                    token_logprobs=logprobs,
                    prompt_tokens=int(usage.get("prompt_tokens", 0)),
                    completion_tokens=int(usage.get("completion_tokens", 0)),
                )
            )
        return responses
