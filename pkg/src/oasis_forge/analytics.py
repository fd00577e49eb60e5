"""Corpus attribute measurements over SFT samples.

Length statistics, type-token ratio, language breakdown, and a root-verb /
noun-object summary. Language detection and verb-object annotation are
plugin callables; only trivial stubs ship here. All functions are pure:
same corpus plus same plugins yields byte-identical reports.
"""

from __future__ import annotations

import math
import unicodedata
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .errors import EmptyCorpus
from .respond import SftSample

FIELD_INSTRUCTION = "instruction"
FIELD_RESPONSE = "response"
UNIT_WORDS = "words"
UNIT_CHARACTERS = "characters"

LanguageDetector = Callable[[str], "str | None"]
VerbObjectAnnotator = Callable[[str], "Iterable[tuple[str, str]] | None"]


@dataclass(frozen=True)
class LengthStats:
    field: str
    unit: str
    mean: float
    std_dev: float  # population, not sample
    count: int


@dataclass(frozen=True)
class TtrReport:
    field: str
    unique_tokens: int
    total_tokens: int
    ratio: float


@dataclass(frozen=True)
class LanguageBreakdown:
    histogram: dict[str, int]
    detector_name: str
    undetected: int


@dataclass(frozen=True)
class VerbSummary:
    verb: str
    top_objects: tuple[str, ...]  # at most 3, by count then lexicographic
    frequency: float  # fraction of all annotated (verb, object) pairs


def _field_texts(corpus: Sequence[SftSample], field: str) -> list[str]:
    if field == FIELD_INSTRUCTION:
        return [sample.instruction for sample in corpus]
    if field == FIELD_RESPONSE:
        return [sample.response for sample in corpus]
    raise ValueError(f"unknown field {field!r}")


def text_length(text: str, unit: str) -> int:
    if unit == UNIT_WORDS:
        return len(text.split())
    if unit == UNIT_CHARACTERS:
        return len(text)
    raise ValueError(f"unknown unit {unit!r}")


def length_stats(corpus: Sequence[SftSample], field: str, unit: str = UNIT_WORDS) -> LengthStats:
    """Mean and population standard deviation of per-record lengths."""
    if not corpus:
        raise EmptyCorpus("length_stats over empty corpus")
    lengths = [text_length(text, unit) for text in _field_texts(corpus, field)]
    count = len(lengths)
    mean = math.fsum(lengths) / count
    variance = math.fsum((value - mean) ** 2 for value in lengths) / count
    return LengthStats(field=field, unit=unit, mean=mean, std_dev=math.sqrt(variance), count=count)


def _is_punctuation(char: str) -> bool:
    return unicodedata.category(char).startswith("P")


def tokenize(text: str) -> list[str]:
    """Case-folded whitespace tokens with edge punctuation stripped.

    Tokens that are pure punctuation vanish and do not count.
    """
    tokens = []
    for raw in text.casefold().split():
        start, end = 0, len(raw)
        while start < end and _is_punctuation(raw[start]):
            start += 1
        while end > start and _is_punctuation(raw[end - 1]):
            end -= 1
        if end > start:
            tokens.append(raw[start:end])
    return tokens


def ttr(corpus: Sequence[SftSample], field: str) -> TtrReport:
    """Type-token ratio: unique words over total words, exact counts."""
    if not corpus:
        raise EmptyCorpus("ttr over empty corpus")
    unique: set[str] = set()
    total = 0
    for text in _field_texts(corpus, field):
        tokens = tokenize(text)
        total += len(tokens)
        unique.update(tokens)
    if total == 0:
        raise EmptyCorpus("ttr needs at least one token")
    return TtrReport(field=field, unique_tokens=len(unique), total_tokens=total, ratio=len(unique) / total)


def language_breakdown(
    corpus: Sequence[SftSample],
    detector: LanguageDetector,
    detector_name: str = "custom",
    field: str = FIELD_INSTRUCTION,
) -> LanguageBreakdown:
    """Per-language counts; detector failures count as undetected."""
    histogram: dict[str, int] = {}
    undetected = 0
    for text in _field_texts(corpus, field):
        try:
            code = detector(text)
        except Exception:
            code = None
        if code is None:
            undetected += 1
        else:
            histogram[code] = histogram.get(code, 0) + 1
    return LanguageBreakdown(
        histogram=dict(sorted(histogram.items())),
        detector_name=detector_name,
        undetected=undetected,
    )


def verb_object_summary(
    corpus: Sequence[SftSample],
    annotator: VerbObjectAnnotator,
    field: str = FIELD_INSTRUCTION,
    min_frequency: float = 0.01,
) -> list[VerbSummary]:
    """Verbs above the frequency cutoff (strict >) with their top objects."""
    verb_counts: dict[str, int] = {}
    object_counts: dict[str, dict[str, int]] = {}
    total = 0
    for text in _field_texts(corpus, field):
        try:
            pairs = annotator(text)
        except Exception:
            pairs = None
        for verb, noun in pairs or ():
            total += 1
            verb_counts[verb] = verb_counts.get(verb, 0) + 1
            per_verb = object_counts.setdefault(verb, {})
            per_verb[noun] = per_verb.get(noun, 0) + 1
    if total == 0:
        return []

    rows = []
    for verb, count in verb_counts.items():
        frequency = count / total
        if frequency > min_frequency:
            ranked = sorted(object_counts[verb].items(), key=lambda item: (-item[1], item[0]))
            rows.append(
                VerbSummary(
                    verb=verb,
                    top_objects=tuple(noun for noun, _ in ranked[:3]),
                    frequency=frequency,
                )
            )
    rows.sort(key=lambda row: (-row.frequency, row.verb))
    return rows


def ascii_language_stub(text: str) -> str | None:
    """Shipped stub detector: 'en' for ASCII-letter-dominant text, else None."""
    letters = [char for char in text if char.isalpha()]
    if not letters:
        return None
    ascii_letters = sum(1 for char in letters if ord(char) < 128)
    return "en" if ascii_letters / len(letters) > 0.9 else None


def first_word_verb_stub(text: str) -> Iterable[tuple[str, str]]:
    """Shipped stub annotator: (first token, last token) of each text."""
    tokens = tokenize(text)
    if len(tokens) >= 2:
        return [(tokens[0], tokens[-1])]
    return []
