"""Chat-template families, embedded judge prompts, and judge-output parsers.

Everything here is a pure function over immutable templates. The judge
templates under ``assets/`` are fixed goldens; they must never be edited
(tests hash-match them against checked-in copies).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import NamedTuple

import yaml

from ..errors import UnknownPromptId

__all__ = [
    "TemplateFamily",
    "BUILTIN_FAMILIES",
    "get_family",
    "load_families",
    "render_hook",
    "render_full_turn",
    "JUDGE_PROMPT_IDS",
    "judge_template",
    "judge_slot_name",
    "render_judge",
    "TriageKind",
    "CategoryResult",
    "parse_category",
    "parse_score",
    "NO_INST",
]

NO_INST = "NO_INST"
INSTRUCTION_MARKER = "Instruction:"


@dataclass(frozen=True)
class TemplateFamily:
    """Control-token scaffolding of one chat template.

    ``render_hook`` must stop immediately after the image token inside an
    open user turn: it contains ``user_open`` and ``image_token`` but neither
    ``user_close`` nor ``assistant_open``.
    """

    name: str
    user_open: str
    user_close: str
    assistant_open: str
    image_token: str

    def render_hook(self) -> str:
        return self.user_open + self.image_token

    def render_full_turn(self, instruction: str) -> str:
        return self.user_open + self.image_token + instruction + self.user_close + self.assistant_open


BUILTIN_FAMILIES: dict[str, TemplateFamily] = {
    family.name: family
    for family in [
        TemplateFamily(
            name="qwen2-vl",
            user_open="<|im_start|>User ",
            user_close="<|im_end|>",
            assistant_open=" <|im_start|>Assistant",
            image_token="<image>",
        ),
        TemplateFamily(
            name="chatml",
            user_open="<|im_start|>user\n",
            user_close="<|im_end|>\n",
            assistant_open="<|im_start|>assistant\n",
            image_token="<image>",
        ),
        TemplateFamily(
            name="vicuna",
            user_open="USER: ",
            user_close="\n",
            assistant_open="ASSISTANT:",
            image_token="<image>",
        ),
    ]
}


def get_family(name: str, extra: dict[str, TemplateFamily] | None = None) -> TemplateFamily:
    if extra and name in extra:
        return extra[name]
    try:
        return BUILTIN_FAMILIES[name]
    except KeyError:
        raise KeyError(f"unknown template family {name!r}") from None


def load_families(path: str) -> dict[str, TemplateFamily]:
    """Load custom families from a YAML file: a list of family mappings."""
    with open(path, "r", encoding="utf-8") as handle:
        raw = yaml.safe_load(handle) or []
    families = {}
    for item in raw:
        family = TemplateFamily(
            name=item["name"],
            user_open=item["user_open"],
            user_close=item["user_close"],
            assistant_open=item["assistant_open"],
            image_token=item["image_token"],
        )
        families[family.name] = family
    return families


def render_hook(family: TemplateFamily) -> str:
    """Truncated prefill: open user turn up to and including the image token."""
    return family.render_hook()


def render_full_turn(family: TemplateFamily, instruction: str) -> str:
    return family.render_full_turn(instruction)


# Slot names are part of each template's contract: the categorization and
# caption prompts take {text}, the scoring prompts take {query}.
_JUDGE_SLOTS = {
    "categorize": "text",
    "solvability": "query",
    "clarity": "query",
    "hallucination": "query",
    "nonsense": "query",
    "caption_refine": "text",
}
JUDGE_PROMPT_IDS = tuple(_JUDGE_SLOTS)


@lru_cache(maxsize=None)
def judge_template(prompt_id: str) -> str:
    if prompt_id not in _JUDGE_SLOTS:
        raise UnknownPromptId(f"no judge prompt {prompt_id!r}")
    text = (
        resources.files("oasis_forge.prompts")
        .joinpath(f"assets/{prompt_id}.txt")
        .read_text(encoding="utf-8")
    )
    slot = "{" + _JUDGE_SLOTS[prompt_id] + "}"
    if text.count(slot) != 1:
        raise ValueError(f"template {prompt_id} must contain {slot} exactly once")
    return text


def judge_slot_name(prompt_id: str) -> str:
    if prompt_id not in _JUDGE_SLOTS:
        raise UnknownPromptId(f"no judge prompt {prompt_id!r}")
    return _JUDGE_SLOTS[prompt_id]


def render_judge(prompt_id: str, payload_text: str) -> str:
    """Substitute the payload into the golden template, byte-exact otherwise."""
    if not payload_text:
        raise ValueError("payload_text must be nonempty")
    template = judge_template(prompt_id)
    slot = "{" + _JUDGE_SLOTS[prompt_id] + "}"
    return template.replace(slot, payload_text)


class TriageKind(str, Enum):
    INSTRUCTION = "instruction"
    CAPTION = "caption"
    MALFORMED = "malformed"


class CategoryResult(NamedTuple):
    kind: TriageKind
    instruction: str | None


_NO_INST_RE = re.compile(r"\bNO_INST\b")
_INSTRUCTION_LINE_RE = re.compile(r"^[ \t]*Instruction:", re.MULTILINE)
_SCORE_RE = re.compile(r"\[\[([1-5])\]\]")


def parse_category(judge_text: str) -> CategoryResult:
    """Classify a categorization reply; total over all strings.

    NO_INST takes precedence over an Instruction: line; co-occurrence
    signals classifier confusion and the record is discarded as a caption.
    The extracted instruction is everything after the first marker, trimmed,
    with interior newlines preserved.
    """
    if _NO_INST_RE.search(judge_text):
        return CategoryResult(TriageKind.CAPTION, None)
    match = _INSTRUCTION_LINE_RE.search(judge_text)
    if match:
        extracted = judge_text[match.end() :].strip()
        if extracted:
            return CategoryResult(TriageKind.INSTRUCTION, extracted)
    return CategoryResult(TriageKind.MALFORMED, None)


def parse_score(judge_text: str) -> int | None:
    """Value of the last legal [[1]]..[[5]] marker, or None when absent.

    Judges often restate criteria (which contain example markers) before the
    verdict, so the final marker is the verdict.
    """
    matches = _SCORE_RE.findall(judge_text)
    if not matches:
        return None
    return int(matches[-1])
