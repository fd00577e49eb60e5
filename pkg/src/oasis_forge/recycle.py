"""Caption recycling: rule filter, keep/drop judge pass, instruction pairing.

Captions that survive both filters are paired with a detailed-description
instruction drawn deterministically per record, so a rerun with the same
seed pairs identically regardless of processing order.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from enum import Enum

from .errors import EmptyList, NetworkError
from .gateway import (
    JUDGE_SAMPLING,
    EndpointConfig,
    Gateway,
    ModelRequest,
    SamplingParams,
    user_chat_message,
)
from .prompts import render_judge
from .respond import Provenance, SftSample

DEFAULT_MIN_CHARS = 20
DEFAULT_MAX_CHARS = 8000
# Unresolved template fields and stuck-key runs; both are common failure
# shapes in raw generations.
DEFAULT_PLACEHOLDER_PATTERNS = (r"\{[^{}]*\}", r"(.)\1{30,}")
DEFAULT_SPECIAL_TOKENS = ("<|im_start|>", "<|im_end|>", "<image>")


class RuleFlag(str, Enum):
    SPECIAL_TOKENS = "special_tokens"
    TOO_SHORT = "too_short"
    TOO_LONG = "too_long"
    PLACEHOLDER_FIELDS = "placeholder_fields"


class RefineVerdict(str, Enum):
    KEEP = "keep"
    DROP = "drop"
    INVALID = "invalid"


@dataclass(frozen=True)
class RecycleRules:
    min_chars: int = DEFAULT_MIN_CHARS
    max_chars: int = DEFAULT_MAX_CHARS
    special_tokens: tuple[str, ...] = DEFAULT_SPECIAL_TOKENS
    placeholder_patterns: tuple[str, ...] = DEFAULT_PLACEHOLDER_PATTERNS


@dataclass(frozen=True)
class CaptionCandidate:
    image_id: str
    gen_index: int
    text: str
    rule_flags: frozenset[RuleFlag] = field(default_factory=frozenset)

    @property
    def passes_rules(self) -> bool:
        return not self.rule_flags


@dataclass(frozen=True)
class DescriptionInstructionList:
    instructions: tuple[str, ...]
    source_note: str = ""

    def __post_init__(self) -> None:
        if not self.instructions:
            raise EmptyList("description instruction list must be nonempty")


def load_instruction_list(path: str, source_note: str = "") -> DescriptionInstructionList:
    """One instruction per line; '#' lines and blanks ignored."""
    instructions = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line and not line.startswith("#"):
                instructions.append(line)
    return DescriptionInstructionList(
        instructions=tuple(instructions), source_note=source_note or path
    )


def rule_filter(
    image_id: str,
    gen_index: int,
    text: str,
    rules: RecycleRules = RecycleRules(),
) -> CaptionCandidate:
    flags = set()
    if any(token in text for token in rules.special_tokens):
        flags.add(RuleFlag.SPECIAL_TOKENS)
    if len(text) < rules.min_chars:
        flags.add(RuleFlag.TOO_SHORT)
    if len(text) > rules.max_chars:
        flags.add(RuleFlag.TOO_LONG)
    if any(re.search(pattern, text) for pattern in rules.placeholder_patterns):
        flags.add(RuleFlag.PLACEHOLDER_FIELDS)
    return CaptionCandidate(
        image_id=image_id, gen_index=gen_index, text=text, rule_flags=frozenset(flags)
    )


_KEEP_RE = re.compile(r"\bKEEP\b")
_DROP_RE = re.compile(r"\bDROP\b")


def parse_refine(judge_text: str) -> RefineVerdict:
    """KEEP/DROP sentinel protocol; anything ambiguous is invalid."""
    keep = bool(_KEEP_RE.search(judge_text))
    drop = bool(_DROP_RE.search(judge_text))
    if keep and not drop:
        return RefineVerdict.KEEP
    if drop and not keep:
        return RefineVerdict.DROP
    return RefineVerdict.INVALID


def llm_refine(
    gateway: Gateway,
    candidate: CaptionCandidate,
    llm_judge: EndpointConfig,
    sampling: SamplingParams = JUDGE_SAMPLING,
) -> RefineVerdict:
    """One few-shot suitability call for a rule-clean caption."""
    if not candidate.passes_rules:
        raise ValueError("llm_refine requires a candidate with empty rule_flags")
    request = ModelRequest(
        mode="chat",
        payload=[user_chat_message(render_judge("caption_refine", candidate.text))],
    )
    try:
        reply = gateway.send(llm_judge, request, sampling)[0].text
    except NetworkError:
        return RefineVerdict.INVALID
    return parse_refine(reply)


def choose_instruction_index(
    seed: int, image_id: str, gen_index: int, list_size: int
) -> int:
    """Uniform, per-record deterministic index into the instruction list.

    Keyed by (seed, record) rather than by draw order so resumed runs pair
    identically to uninterrupted ones.
    """
    if list_size < 1:
        raise EmptyList("instruction list must be nonempty")
    digest = hashlib.sha256(f"{seed}:{image_id}:{gen_index}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % list_size


def pair_with_instruction(
    candidate: CaptionCandidate,
    instructions: DescriptionInstructionList,
    rng_seed: int,
) -> SftSample:
    index = choose_instruction_index(
        rng_seed, candidate.image_id, candidate.gen_index, len(instructions.instructions)
    )
    return SftSample(
        image_id=candidate.image_id,
        instruction=instructions.instructions[index],
        response=candidate.text,
        provenance=Provenance.RECYCLED_CAPTION,
    )
