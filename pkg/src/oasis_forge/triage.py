"""Step 2: LLM triage of raw generations into instruction / caption / malformed.

The judge sees only the generated text (the categorization prompt has a
single text slot); captions are routed to the recycling queue by the
pipeline, malformed records are counted and dropped from the instruction
path.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import LogprobsUnavailable, NetworkError, SchemaError
from .gateway import (
    JUDGE_SAMPLING,
    EndpointConfig,
    Gateway,
    ModelRequest,
    SamplingParams,
    user_chat_message,
)
from .hooking import RawGeneration
from .prompts import TriageKind, parse_category, render_judge

# Guard against judge runaway; instructions longer than this are marked
# malformed. Plumbing threshold, config-overridable.
DEFAULT_MAX_INSTRUCTION_CHARS = 4096


@dataclass(frozen=True)
class TriageOutcome:
    image_id: str
    gen_index: int
    kind: TriageKind
    instruction_text: str | None = None
    raw_judge_text: str = ""
    error: str | None = None

    def __post_init__(self) -> None:
        if self.kind is TriageKind.INSTRUCTION and not self.instruction_text:
            raise ValueError("instruction outcomes must carry nonempty instruction_text")


def classify(
    gateway: Gateway,
    gen: RawGeneration,
    judge: EndpointConfig,
    sampling: SamplingParams = JUDGE_SAMPLING,
    max_instruction_chars: int = DEFAULT_MAX_INSTRUCTION_CHARS,
) -> TriageOutcome:
    """One judge call per generation; deterministic sampling by default."""
    if not gen.text:
        return TriageOutcome(
            image_id=gen.image_id,
            gen_index=gen.gen_index,
            kind=TriageKind.MALFORMED,
            raw_judge_text="",
            error="empty generation",
        )

    request = ModelRequest(
        mode="chat",
        payload=[user_chat_message(render_judge("categorize", gen.text))],
    )
    try:
        judge_text = gateway.send(judge, request, sampling)[0].text
    except (NetworkError, SchemaError, LogprobsUnavailable) as exc:
        return TriageOutcome(
            image_id=gen.image_id,
            gen_index=gen.gen_index,
            kind=TriageKind.MALFORMED,
            raw_judge_text="",
            error=f"judge unavailable: {exc}",
        )

    kind, instruction = parse_category(judge_text)
    if kind is TriageKind.INSTRUCTION and len(instruction or "") > max_instruction_chars:
        kind, instruction = TriageKind.MALFORMED, None
    return TriageOutcome(
        image_id=gen.image_id,
        gen_index=gen.gen_index,
        kind=kind,
        instruction_text=instruction,
        raw_judge_text=judge_text,
    )
