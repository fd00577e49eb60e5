"""Step 3: four-dimension instruction scoring and the acceptance rule.

Solvability, clarity, and hallucination are judged by the multimodal
endpoint with the image attached; nonsense goes to the text-only judge.
A report is accepted only when hallucination and nonsense are perfect and
solvability/clarity each clear the floor with a sufficient sum.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from itertools import product

from .errors import LogprobsUnavailable, NetworkError, SchemaError
from .gateway import (
    JUDGE_SAMPLING,
    EndpointConfig,
    Gateway,
    ModelRequest,
    SamplingParams,
    user_chat_message,
)
from .hooking import ImageRecord
from .prompts import parse_score, render_judge

DIMENSIONS = ("solvability", "clarity", "hallucination", "nonsense")
# Dimensions judged with the image attached; nonsense is text-only because
# the language judge is more sensitive to grammaticality.
IMAGE_DIMENSIONS = ("solvability", "clarity", "hallucination")


class Verdict(str, Enum):
    ACCEPT = "accept"
    REJECT = "reject"
    INVALID = "invalid"


class RejectReason(str, Enum):
    UNPARSED_SCORE = "unparsed_score"
    HALLUCINATION_LT5 = "hallucination_lt5"
    NONSENSE_LT5 = "nonsense_lt5"
    DIM_BELOW_3 = "dim_below_3"
    SUM_BELOW_7 = "sum_below_7"


@dataclass(frozen=True)
class QcThresholds:
    hallucination_required: int = 5
    nonsense_required: int = 5
    dim_floor: int = 3
    pair_sum_floor: int = 7


DEFAULT_THRESHOLDS = QcThresholds()


@dataclass(frozen=True)
class QcReport:
    image_id: str
    gen_index: int
    solvability: int | None
    clarity: int | None
    hallucination: int | None
    nonsense: int | None
    verdict: Verdict
    reject_reason: RejectReason | None = None

    def scores(self) -> tuple[int | None, int | None, int | None, int | None]:
        return (self.solvability, self.clarity, self.hallucination, self.nonsense)


def decide(
    solvability: int | None,
    clarity: int | None,
    hallucination: int | None,
    nonsense: int | None,
    thresholds: QcThresholds = DEFAULT_THRESHOLDS,
) -> tuple[Verdict, RejectReason | None]:
    """Apply the acceptance rule; reasons follow a fixed clause order."""
    scores = (solvability, clarity, hallucination, nonsense)
    if any(score is None for score in scores):
        return Verdict.INVALID, RejectReason.UNPARSED_SCORE
    if hallucination < thresholds.hallucination_required:
        return Verdict.REJECT, RejectReason.HALLUCINATION_LT5
    if nonsense < thresholds.nonsense_required:
        return Verdict.REJECT, RejectReason.NONSENSE_LT5
    if solvability < thresholds.dim_floor or clarity < thresholds.dim_floor:
        return Verdict.REJECT, RejectReason.DIM_BELOW_3
    if solvability + clarity < thresholds.pair_sum_floor:
        return Verdict.REJECT, RejectReason.SUM_BELOW_7
    return Verdict.ACCEPT, None


def score_dimension(
    gateway: Gateway,
    instruction: str,
    image: ImageRecord,
    dim: str,
    mllm_judge: EndpointConfig,
    llm_judge: EndpointConfig,
    sampling: SamplingParams = JUDGE_SAMPLING,
    retry_unparsed: bool = False,
) -> int | None:
    """One judge call for one dimension; None when the reply has no marker."""
    if dim not in DIMENSIONS:
        raise ValueError(f"unknown quality dimension {dim!r}")
    if not instruction:
        raise ValueError("instruction must be nonempty")

    prompt = render_judge(dim, instruction)
    if dim in IMAGE_DIMENSIONS:
        endpoint = mllm_judge
        request = ModelRequest(
            mode="chat",
            payload=[user_chat_message(prompt, n_images=1)],
            images=(image.uri,),
        )
    else:
        endpoint = llm_judge
        request = ModelRequest(mode="chat", payload=[user_chat_message(prompt)])

    attempts = 2 if retry_unparsed else 1
    score: int | None = None
    for _ in range(attempts):
        try:
            reply = gateway.send(endpoint, request, sampling)[0].text
        except (NetworkError, SchemaError, LogprobsUnavailable):
            return None
        score = parse_score(reply)
        if score is not None:
            return score
    return score


def evaluate(
    gateway: Gateway,
    instruction: str,
    image: ImageRecord,
    gen_index: int,
    mllm_judge: EndpointConfig,
    llm_judge: EndpointConfig,
    sampling: SamplingParams = JUDGE_SAMPLING,
    thresholds: QcThresholds = DEFAULT_THRESHOLDS,
    retry_unparsed: bool = False,
) -> QcReport:
    """Score all four dimensions and apply the acceptance rule."""
    scores = {
        dim: score_dimension(
            gateway,
            instruction,
            image,
            dim,
            mllm_judge,
            llm_judge,
            sampling,
            retry_unparsed,
        )
        for dim in DIMENSIONS
    }
    verdict, reason = decide(
        scores["solvability"],
        scores["clarity"],
        scores["hallucination"],
        scores["nonsense"],
        thresholds,
    )
    return QcReport(
        image_id=image.image_id,
        gen_index=gen_index,
        solvability=scores["solvability"],
        clarity=scores["clarity"],
        hallucination=scores["hallucination"],
        nonsense=scores["nonsense"],
        verdict=verdict,
        reject_reason=reason,
    )


def verdict_oracle(
    thresholds: QcThresholds = DEFAULT_THRESHOLDS,
) -> dict[tuple[int, int, int, int], Verdict]:
    """Brute-force verdict table over all 625 score 4-tuples.

    Written as a direct transcription of the retention rule, independent of
    :func:`decide`, so the two can be checked against each other.
    """
    table: dict[tuple[int, int, int, int], Verdict] = {}
    for s, c, h, n in product(range(1, 6), repeat=4):
        keep_h = h >= thresholds.hallucination_required
        keep_n = n >= thresholds.nonsense_required
        keep_pair = (
            s >= thresholds.dim_floor
            and c >= thresholds.dim_floor
            and s + c >= thresholds.pair_sum_floor
        )
        table[(s, c, h, n)] = Verdict.ACCEPT if (keep_h and keep_n and keep_pair) else Verdict.REJECT
    return table


def score_histogram(reports: list[QcReport]) -> dict[str, dict[str, int]]:
    """Per-dimension score distribution (diagnostic only)."""
    histogram: dict[str, dict[str, int]] = {
        dim: {str(value): 0 for value in range(1, 6)} | {"unparsed": 0} for dim in DIMENSIONS
    }
    for report in reports:
        for dim, score in zip(DIMENSIONS, report.scores()):
            histogram[dim]["unparsed" if score is None else str(score)] += 1
    return histogram
