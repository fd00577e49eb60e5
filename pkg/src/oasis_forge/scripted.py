"""Deterministic scripted backend used for tests and offline runs.

Responses are a pure function of (request fingerprint, call index), so any
run against a scripted backend replays byte-identically. A ``default``
responder handles fingerprints missing from the script; the bundled
:func:`synthetic_responder` answers every pipeline stage deterministically
from directives embedded in the image bytes, which is what `scripted://`
endpoints use.
"""

from __future__ import annotations

import hashlib
import re
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable

from .errors import ScriptMiss
from .gateway import (
    FINISH_STOP,
    RAW_COMPLETION,
    EndpointConfig,
    ModelRequest,
    ModelResponse,
    SamplingParams,
    _message_parts,
    request_fingerprint,
)

# A script entry is what one call consumes:
#   str / ModelResponse            -> single response (replicated to n_samples)
#   tuple(str | ModelResponse,...) -> explicit multi-sample bundle
#   Exception                      -> raised by the call attempt
# A script VALUE is either one sticky entry (every call gets it) or a list of
# entries consumed one per call.
ScriptEntry = Any
Responder = Callable[[ModelRequest, SamplingParams, "list[bytes]"], list[ModelResponse]]


def _as_response(item: str | ModelResponse) -> ModelResponse:
    if isinstance(item, ModelResponse):
        return item
    return ModelResponse(text=item, finish_reason=FINISH_STOP)


def _entry_to_responses(entry: ScriptEntry, n_samples: int) -> list[ModelResponse]:
    if isinstance(entry, BaseException):
        raise entry
    if isinstance(entry, tuple):
        return [_as_response(item) for item in entry]
    return [_as_response(entry)] * n_samples


@dataclass(frozen=True)
class LoggedRequest:
    fingerprint: str
    endpoint: EndpointConfig
    request: ModelRequest
    sampling: SamplingParams
    image_bytes: tuple[bytes, ...]


class ScriptedBackend:
    """Canned backend keyed by request fingerprint.

    Also instruments every call (request log, in-flight high-water mark) so
    tests can assert payload purity, routing, and concurrency bounds.
    """

    def __init__(
        self,
        script: dict[str, ScriptEntry | list[ScriptEntry]] | None = None,
        default: Responder | str | None = None,
        strict: bool = True,
        latency: float = 0.0,
    ) -> None:
        self._script = dict(script or {})
        self._default = default
        self._strict = strict
        self._latency = latency
        self._lock = threading.Lock()
        self._call_index: dict[str, int] = {}
        self.requests: list[LoggedRequest] = []
        self.in_flight = 0
        self.max_in_flight = 0

    def script_for(
        self,
        request: ModelRequest,
        sampling: SamplingParams,
        entry: ScriptEntry | list[ScriptEntry],
        image_bytes: list[bytes] | None = None,
    ) -> str:
        """Register an entry under the fingerprint of a concrete request."""
        fp = request_fingerprint(request, sampling, image_bytes)
        self._script[fp] = entry
        return fp

    def complete(
        self,
        endpoint: EndpointConfig,
        request: ModelRequest,
        sampling: SamplingParams,
        image_bytes: list[bytes],
    ) -> list[ModelResponse]:
        fp = request_fingerprint(request, sampling, image_bytes)
        with self._lock:
            self.requests.append(
                LoggedRequest(fp, endpoint, request, sampling, tuple(image_bytes))
            )
            index = self._call_index.get(fp, 0)
            self._call_index[fp] = index + 1
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
        try:
            if self._latency:
                time.sleep(self._latency)
            if fp in self._script:
                value = self._script[fp]
                if isinstance(value, list):
                    if index >= len(value):
                        raise ScriptMiss(f"script for {fp[:12]} exhausted at call {index}")
                    entry = value[index]
                else:
                    entry = value
                return _entry_to_responses(entry, sampling.n_samples)
            if callable(self._default):
                return self._default(request, sampling, image_bytes)
            if self._default is not None:
                return _entry_to_responses(self._default, sampling.n_samples)
            if self._strict:
                raise ScriptMiss(f"no script entry for fingerprint {fp}")
            return [_as_response("")] * sampling.n_samples
        finally:
            with self._lock:
                self.in_flight -= 1


# ---------------------------------------------------------------------------
# Synthetic responder: directive-driven answers for offline end-to-end runs.
#
# An image whose bytes start with ``case=`` is a directive, e.g.
#   case=instruction;scores=3455;id=0007
#   case=caption;refine=keep;id=0012
# The hook reply embeds the directive as ``[case=...]`` inside its text so
# every later text-only stage can recover it from its payload.
# ---------------------------------------------------------------------------

_DIRECTIVE_RE = re.compile(r"\[(case=[^\[\]]*)\]")


def _parse_directive(raw: str) -> dict[str, str]:
    fields: dict[str, str] = {}
    for chunk in raw.split(";"):
        if "=" in chunk:
            key, value = chunk.split("=", 1)
            fields[key.strip()] = value.strip()
    return fields


def _payload_text(request: ModelRequest) -> str:
    if request.mode == RAW_COMPLETION:
        return request.payload
    texts = []
    for message in request.payload:
        for part in _message_parts(message):
            if part.get("type") != "image":
                texts.append(part.get("text", ""))
    return "\n".join(texts)


def _directive_from(text: str) -> dict[str, str]:
    match = _DIRECTIVE_RE.search(text)
    if match:
        return _parse_directive(match.group(1))
    return {}


def _stable_digits(text: str, count: int) -> str:
    digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
    return "".join(str(int(ch, 16) % 5 + 1) for ch in digest[:count])


def _hook_text(directive: dict[str, str], raw: str) -> str:
    case = directive.get("case", "instruction")
    tag = directive.get("id", "0")
    if case == "caption":
        style = directive.get("style", "clean")
        if style == "short":
            return "ok"
        if style == "special":
            return f"<|im_start|> The image region {tag} shows a quiet street."
        if style == "long":
            return "A very long caption. " + ("detail " * 2000)
        if style == "placeholder":
            return f"The image shows {{object}} near region {tag} in the afternoon."
        return f"A wide view of region {tag} with several small landmarks. [{raw}]"
    if case == "malformed":
        return f"model musing {tag} with no clear form [{raw}]"
    if case == "empty":
        return ""
    return f"What does region {tag} of the image show? Explain briefly. [{raw}]"


def _plain_replies(text: str, payload: str, n_samples: int) -> list[ModelResponse]:
    return [
        ModelResponse(
            text=text,
            finish_reason=FINISH_STOP,
            prompt_tokens=len(payload.split()),
            completion_tokens=len(text.split()),
        )
    ] * n_samples


def synthetic_responder(
    request: ModelRequest,
    sampling: SamplingParams,
    image_bytes: list[bytes],
) -> list[ModelResponse]:
    """Answer any pipeline request deterministically from its content."""
    payload = _payload_text(request)

    if request.mode == RAW_COMPLETION:
        raw = ""
        directive: dict[str, str] = {}
        if image_bytes:
            head = image_bytes[0].decode("utf-8", errors="replace")
            if head.startswith("case="):
                raw = head
                directive = _parse_directive(head)
        return _plain_replies(_hook_text(directive, raw), payload, sampling.n_samples)

    directive = _directive_from(payload)
    raw_directive = _DIRECTIVE_RE.search(payload)

    if "output 'NO_INST'" in payload:
        case = directive.get("case")
        if case == "instruction":
            tag = directive.get("id", "0")
            text = (
                f"Instruction: What does region {tag} of the image show? "
                f"Explain briefly. [{raw_directive.group(1)}]"
            )
        elif case is None or case == "caption":
            text = "NO_INST"
        else:
            text = "The generated text resists classification."
        return _plain_replies(text, payload, sampling.n_samples)

    if "KEEP if the text is suitable" in payload:
        verdict = directive.get("refine", "keep")
        text = {"keep": "KEEP", "drop": "DROP"}.get(verdict, "perhaps, perhaps not")
        return _plain_replies(text, payload, sampling.n_samples)

    quality_dims = {
        "evaluate the solvability": 0,
        "evaluate the clarity": 1,
        "contains hallucination": 2,
        "contains nonsense": 3,
    }
    for marker, position in quality_dims.items():
        if marker in payload:
            scores = directive.get("scores", "5555")
            if scores == "unparsed":
                text = "I am unable to commit to a rating."
            else:
                text = f"Score: [[{scores[position]}]]"
            return _plain_replies(text, payload, sampling.n_samples)

    response_dims = {"helpfulness": 0, "truthfulness": 1, "instruction-following": 2}
    for marker, position in response_dims.items():
        if f"evaluate the {marker}" in payload:
            scores = directive.get("resp", "555")
            text = f"Score: [[{scores[position]}]]"
            return _plain_replies(text, payload, sampling.n_samples)

    # Anything else is response generation for an (image, instruction) turn.
    tag = directive.get("id", _stable_digits(payload, 4))
    responses = []
    for sample_index in range(sampling.n_samples):
        text = f"A grounded description of region {tag}, part {sample_index}."
        logprobs = None
        if sampling.want_logprobs:
            base = int(hashlib.sha256(f"{payload}:{sample_index}".encode()).hexdigest()[:8], 16)
            logprobs = tuple(
                (f"tok{pos}", -((base >> pos) % 100 + 1) / 100.0) for pos in range(4)
            )
        responses.append(
            ModelResponse(
                text=text,
                finish_reason=FINISH_STOP,
                token_logprobs=logprobs,
                prompt_tokens=len(payload.split()),
                completion_tokens=8,
            )
        )
    return responses


def synthetic_backend(latency: float = 0.0) -> ScriptedBackend:
    """Backend for `scripted://` endpoints: no script, synthetic default."""
    return ScriptedBackend(script=None, default=synthetic_responder, latency=latency)
