from __future__ import annotations

import hashlib
import random
import re
from importlib import resources
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oasis_forge.errors import UnknownPromptId
from oasis_forge.prompts import (
    BUILTIN_FAMILIES,
    TriageKind,
    get_family,
    judge_template,
    parse_category,
    parse_score,
    render_full_turn,
    render_hook,
    render_judge,
)

GOLDEN_DIR = Path(__file__).parent / "golden"
GOLDEN_IDS = ("categorize", "solvability", "clarity", "hallucination", "nonsense")


def golden_text(prompt_id: str) -> str:
    return (GOLDEN_DIR / f"{prompt_id}.txt").read_text(encoding="utf-8")


# ---------------------------------------------------------------------------
# Golden templates
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("prompt_id", GOLDEN_IDS)
def test_embedded_templates_hash_match_goldens(prompt_id: str) -> None:
    embedded = judge_template(prompt_id)
    golden = golden_text(prompt_id)
    assert hashlib.sha256(embedded.encode()).hexdigest() == hashlib.sha256(golden.encode()).hexdigest()
    assert embedded == golden


@pytest.mark.parametrize("prompt_id", GOLDEN_IDS + ("caption_refine",))
def test_templates_contain_slot_exactly_once(prompt_id: str) -> None:
    template = judge_template(prompt_id)
    slot = "{text}" if prompt_id in ("categorize", "caption_refine") else "{query}"
    assert template.count(slot) == 1


def test_package_assets_match_checked_in_goldens_bytewise() -> None:
    for prompt_id in GOLDEN_IDS:
        asset = (
            resources.files("oasis_forge.prompts")
            .joinpath(f"assets/{prompt_id}.txt")
            .read_bytes()
        )
        assert asset == (GOLDEN_DIR / f"{prompt_id}.txt").read_bytes()


# ---------------------------------------------------------------------------
# Hook rendering
# ---------------------------------------------------------------------------


def test_qwen2_vl_hook_is_exact() -> None:
    assert render_hook(get_family("qwen2-vl")) == "<|im_start|>User <image>"


def test_custom_family_hook_is_concatenation() -> None:
    from oasis_forge.prompts import TemplateFamily

    family = TemplateFamily(
        name="tiny", user_open="<U>", user_close="</U>", assistant_open="<A>", image_token="<img>"
    )
    assert render_hook(family) == "<U><img>"


@pytest.mark.parametrize("name", sorted(BUILTIN_FAMILIES))
def test_hook_never_contains_post_query_template(name: str) -> None:
    family = BUILTIN_FAMILIES[name]
    hook = render_hook(family)
    assert family.assistant_open not in hook
    assert family.user_close not in hook
    assert hook.endswith(family.image_token)


@pytest.mark.parametrize("name", sorted(BUILTIN_FAMILIES))
def test_hook_is_strict_prefix_of_full_turn(name: str) -> None:
    family = BUILTIN_FAMILIES[name]
    full = render_full_turn(family, "Describe the image.")
    hook = render_hook(family)
    assert full.startswith(hook)
    assert len(full) > len(hook)


# ---------------------------------------------------------------------------
# Judge rendering
# ---------------------------------------------------------------------------


def test_render_categorize_substitutes_payload_tail() -> None:
    rendered = render_judge("categorize", "There is a cat.")
    assert rendered.endswith("[Begin of Text]\nThere is a cat.\n[End of Text]")
    assert rendered == golden_text("categorize").replace("{text}", "There is a cat.")


@pytest.mark.parametrize("prompt_id", ("solvability", "clarity", "hallucination", "nonsense"))
def test_render_scoring_prompts_byte_exact(prompt_id: str) -> None:
    rendered = render_judge(prompt_id, "Q?")
    assert rendered.endswith("[Query]\nQ?")
    assert rendered == golden_text(prompt_id).replace("{query}", "Q?")


def test_render_judge_rejects_empty_payload() -> None:
    with pytest.raises(ValueError):
        render_judge("categorize", "")


def test_render_judge_unknown_id() -> None:
    with pytest.raises(UnknownPromptId):
        render_judge("politeness", "Q?")


# ---------------------------------------------------------------------------
# parse_category
# ---------------------------------------------------------------------------


def _golden_example_answers() -> list[str]:
    """The six worked answers embedded in the categorization template."""
    text = golden_text("categorize")
    answers = re.findall(r"Answer: \n(.*?)\n+----- ", text, re.DOTALL)
    assert len(answers) == 6
    return answers


def test_golden_examples_expected_outcomes() -> None:
    answers = _golden_example_answers()
    expected_kinds = [
        TriageKind.INSTRUCTION,
        TriageKind.CAPTION,
        TriageKind.INSTRUCTION,
        TriageKind.INSTRUCTION,
        TriageKind.INSTRUCTION,
        TriageKind.CAPTION,
    ]
    for answer, expected in zip(answers, expected_kinds):
        kind, instruction = parse_category(answer)
        assert kind is expected
        if expected is TriageKind.INSTRUCTION:
            assert answer.endswith(instruction)
            assert instruction == answer[len("Instruction:") :].strip()
        else:
            assert instruction is None


def test_example_one_extraction_exact() -> None:
    kind, instruction = parse_category(
        "Instruction: Who increased the number of insurgents in the valley?"
    )
    assert kind is TriageKind.INSTRUCTION
    assert instruction == "Who increased the number of insurgents in the valley?"


def test_example_four_extraction_exact() -> None:
    kind, instruction = parse_category(
        "Instruction: Could you please summarize the mission statement of the company "
        "and the benefits it promises to its customers in 30 seconds or less?"
    )
    assert kind is TriageKind.INSTRUCTION
    assert instruction == (
        "Could you please summarize the mission statement of the company and the "
        "benefits it promises to its customers in 30 seconds or less?"
    )


def test_no_inst_alone_is_caption() -> None:
    assert parse_category("NO_INST") == (TriageKind.CAPTION, None)


def test_no_inst_takes_precedence_over_instruction_marker() -> None:
    kind, _ = parse_category("Instruction: do the thing\nNO_INST")
    assert kind is TriageKind.CAPTION


def test_no_inst_requires_whole_word() -> None:
    kind, _ = parse_category("The text says XNO_INSTY and nothing else.")
    assert kind is TriageKind.MALFORMED


def test_plain_prose_is_malformed() -> None:
    assert parse_category("The image shows a dog.") == (TriageKind.MALFORMED, None)


def test_multiline_instruction_preserved_verbatim() -> None:
    reply = "Answer:\nInstruction: First sentence.\n\nSecond sentence with detail."
    kind, instruction = parse_category(reply)
    assert kind is TriageKind.INSTRUCTION
    assert instruction == "First sentence.\n\nSecond sentence with detail."


def test_instruction_marker_mid_line_does_not_count() -> None:
    kind, _ = parse_category("The text has no Instruction: markers at line start.")
    assert kind is TriageKind.MALFORMED


def test_empty_extraction_is_malformed() -> None:
    assert parse_category("Instruction:   ") == (TriageKind.MALFORMED, None)


@given(st.text(max_size=200))
def test_parse_category_total(text: str) -> None:
    kind, instruction = parse_category(text)
    assert kind in (TriageKind.INSTRUCTION, TriageKind.CAPTION, TriageKind.MALFORMED)
    assert (instruction is not None) == (kind is TriageKind.INSTRUCTION)


# ---------------------------------------------------------------------------
# parse_score
# ---------------------------------------------------------------------------


def _scan_oracle(text: str) -> int | None:
    """Independent brute-force scan over every position for legal markers."""
    last = None
    for position in range(len(text)):
        for value in range(1, 6):
            marker = f"[[{value}]]"
            if text.startswith(marker, position):
                last = value
    return last


def test_parse_score_direct() -> None:
    assert parse_score("Score: [[4]]") == 4


def test_parse_score_last_marker_wins() -> None:
    text = "I considered [[2]] but final Score: [[5]]"
    assert parse_score(text) == 5
    assert parse_score(text) == _scan_oracle(text)


def test_parse_score_out_of_range_is_malformed() -> None:
    assert parse_score("[[6]] [[0]]") is None
    assert parse_score("") is None
    assert parse_score("Score: 4") is None


@given(
    st.lists(
        st.one_of(st.integers(min_value=1, max_value=5), st.text(max_size=12)),
        min_size=1,
        max_size=8,
    )
)
def test_parse_score_matches_scan_oracle(pieces) -> None:
    text = " ".join(f"[[{piece}]]" if isinstance(piece, int) else str(piece) for piece in pieces)
    assert parse_score(text) == _scan_oracle(text)


def test_parse_score_random_padding_recovers_marker() -> None:
    rng = random.Random(20240811)
    alphabet = "abc [](){}<>0123456789:;.,!?\n\t"
    for _ in range(2000):
        value = rng.randrange(1, 6)
        left = "".join(rng.choice(alphabet) for _ in range(rng.randrange(0, 40)))
        right = "".join(rng.choice(alphabet) for _ in range(rng.randrange(0, 40)))
        text = left + f"[[{value}]]" + right
        if len(re.findall(r"\[\[([1-5])\]\]", text)) != 1:
            continue  # padding accidentally created a second marker
        assert parse_score(text) == value
