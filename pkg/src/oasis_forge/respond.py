"""Response generation for accepted (image, instruction) pairs.

The default pipeline applies no response-side quality control: one sample
per record flows straight into the final dataset. The two optional filters
(confidence selection over several samples, three-dimension scoring) are
ablation strategies and ship switched off.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .errors import EmptyField, MissingNll, NetworkError
from .gateway import (
    GENERATION_SAMPLING,
    JUDGE_SAMPLING,
    EndpointConfig,
    Gateway,
    ModelRequest,
    ModelResponse,
    SamplingParams,
    user_chat_message,
)
from .hooking import ImageRecord
from .prompts import parse_score
from .quality import QcReport


class Provenance(str, Enum):
    OASIS_INSTRUCTION = "oasis_instruction"
    RECYCLED_CAPTION = "recycled_caption"


@dataclass(frozen=True)
class ResponseCandidate:
    text: str
    sample_index: int
    avg_nll: float | None = None

    def __post_init__(self) -> None:
        if self.avg_nll is not None and self.avg_nll < 0:
            raise ValueError("avg_nll must be nonnegative")


@dataclass(frozen=True)
class ResponseScore:
    helpfulness: int | None
    truthfulness: int | None
    instruction_following: int | None

    @property
    def full_marks(self) -> bool:
        return (
            self.helpfulness == 5
            and self.truthfulness == 5
            and self.instruction_following == 5
        )

    @property
    def invalid(self) -> bool:
        return None in (self.helpfulness, self.truthfulness, self.instruction_following)


@dataclass(frozen=True)
class SftSample:
    image_id: str
    instruction: str
    response: str
    provenance: Provenance
    qc: QcReport | None = None

    def __post_init__(self) -> None:
        if not self.instruction:
            raise EmptyField("instruction must be nonempty")
        if not self.response:
            raise EmptyField("response must be nonempty")


def avg_nll_of(response: ModelResponse) -> float:
    """Mean negative log-likelihood over all returned completion tokens."""
    if not response.token_logprobs:
        raise MissingNll("response carries no token logprobs")
    total = -sum(logprob for _, logprob in response.token_logprobs)
    return total / len(response.token_logprobs)


def response_request(image: ImageRecord, instruction: str) -> ModelRequest:
    # Plain chat turn, no system preamble: minimal prompt, minimal bias.
    return ModelRequest(
        mode="chat",
        payload=[user_chat_message(instruction, n_images=1)],
        images=(image.uri,),
    )


def generate_response(
    gateway: Gateway,
    image: ImageRecord,
    instruction: str,
    mllm: EndpointConfig,
    sampling: SamplingParams = GENERATION_SAMPLING,
) -> list[ResponseCandidate]:
    """One call returning ``sampling.n_samples`` candidates, indexed in order."""
    if not instruction:
        raise EmptyField("instruction must be nonempty")
    responses = gateway.send(mllm, response_request(image, instruction), sampling)
    return [
        ResponseCandidate(
            text=response.text,
            sample_index=index,
            avg_nll=avg_nll_of(response) if sampling.want_logprobs else None,
        )
        for index, response in enumerate(responses)
    ]


def nll_select(
    candidates: list[ResponseCandidate], prefer_high_nll: bool = False
) -> ResponseCandidate:
    """Pick the most confident candidate: minimal average token NLL.

    Ties resolve to the lowest sample_index. ``prefer_high_nll`` flips the
    direction for ablation comparisons.
    """
    if not candidates:
        raise ValueError("candidates must be nonempty")
    best: ResponseCandidate | None = None
    for candidate in candidates:
        if candidate.avg_nll is None:
            raise MissingNll(f"candidate {candidate.sample_index} has no avg_nll")
        if best is None:
            best = candidate
            continue
        better = candidate.avg_nll > best.avg_nll if prefer_high_nll else candidate.avg_nll < best.avg_nll
        if better or (candidate.avg_nll == best.avg_nll and candidate.sample_index < best.sample_index):
            best = candidate
    assert best is not None
    return best


# Project-defined response-scoring prompts (no fixed golden exists for these;
# override freely). They reuse the [[n]] marker protocol so parse_score
# applies unchanged.
RESPONSE_SCORE_DIMENSIONS = ("helpfulness", "truthfulness", "instruction-following")

_RESPONSE_SCORE_TEMPLATE = """Your task is to evaluate the {dimension} of a response to a query about an image, on a scale of 1 to 5, with 1 being the worst and 5 being the best.

{criteria}

Please rate the response on a scale of 1 to 5. Use "[[1]]", "[[2]]", "[[3]]", "[[4]]", "[[5]]" to indicate your evaluation score in the key 'Score'.

[Query]
{query}

[Response]
{response}"""

_RESPONSE_SCORE_CRITERIA = {
    "helpfulness": "A helpful response addresses the query directly, provides the information or action the query asks for, and adds enough detail to be useful without padding.",
    "truthfulness": "A truthful response is consistent with the visible content of the image and makes no claims the image cannot support.",
    "instruction-following": "A response follows the instruction when it respects every constraint the query states (format, length, scope) and answers the question that was actually asked.",
}


def render_response_score_prompt(dimension: str, query: str, response: str) -> str:
    if dimension not in RESPONSE_SCORE_DIMENSIONS:
        raise ValueError(f"unknown response dimension {dimension!r}")
    return _RESPONSE_SCORE_TEMPLATE.format(
        dimension=dimension,
        criteria=_RESPONSE_SCORE_CRITERIA[dimension],
        query=query,
        response=response,
    )


def score_response(
    gateway: Gateway,
    image: ImageRecord,
    instruction: str,
    response: str,
    mllm_judge: EndpointConfig,
    sampling: SamplingParams = JUDGE_SAMPLING,
) -> ResponseScore:
    """Three judge calls, one per dimension, each with the image attached."""
    if not response:
        raise EmptyField("response must be nonempty")
    scores = []
    for dimension in RESPONSE_SCORE_DIMENSIONS:
        prompt = render_response_score_prompt(dimension, instruction, response)
        request = ModelRequest(
            mode="chat",
            payload=[user_chat_message(prompt, n_images=1)],
            images=(image.uri,),
        )
        try:
            reply = gateway.send(mllm_judge, request, sampling)[0].text
        except NetworkError:
            scores.append(None)
            continue
        scores.append(parse_score(reply))
    return ResponseScore(
        helpfulness=scores[0], truthfulness=scores[1], instruction_following=scores[2]
    )


def assemble_sample(
    image_id: str,
    instruction: str,
    response: str,
    provenance: Provenance,
    qc: QcReport | None = None,
) -> SftSample:
    return SftSample(
        image_id=image_id,
        instruction=instruction,
        response=response,
        provenance=provenance,
        qc=qc,
    )
