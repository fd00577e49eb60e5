"""Step 1: generate candidate text by prefilling only an open user turn.

The outbound payload is exactly the truncated hook render plus the image,
no instruction text and no post-query template, so the model continues the
turn and the continuation becomes the candidate instruction.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from .errors import ImageUnreadable, NetworkError
from .gateway import (
    FINISH_ERROR,
    RAW_COMPLETION,
    EndpointConfig,
    Gateway,
    ModelRequest,
    SamplingParams,
)
from .prompts import TemplateFamily, render_hook


@dataclass(frozen=True)
class ImageRecord:
    """One source image; ``image_id`` is the content hash by default."""

    image_id: str
    uri: str
    source_tag: str = ""
    width: int | None = None
    height: int | None = None


@dataclass(frozen=True)
class RawGeneration:
    # text may be empty: the model can emit its end token immediately, and
    # such records are kept (triage will classify them malformed).
    image_id: str
    gen_index: int
    text: str
    finish_reason: str
    created_at: str


def hook_request(image: ImageRecord, family: TemplateFamily) -> ModelRequest:
    """Build the raw-completion request for one image.

    Raises ImageUnreadable before any network call when the uri is dead.
    """
    if not Path(image.uri).is_file():
        raise ImageUnreadable(f"image uri not readable: {image.uri}")
    return ModelRequest(
        mode=RAW_COMPLETION,
        payload=render_hook(family),
        images=(image.uri,),
        image_placeholder=family.image_token,
    )


def synthesize(
    gateway: Gateway,
    image: ImageRecord,
    family: TemplateFamily,
    endpoint: EndpointConfig,
    sampling: SamplingParams,
    fanout: int = 1,
) -> list[RawGeneration]:
    """Produce exactly ``fanout`` generations for one image.

    Failures are recorded in-band with finish_reason=error, never dropped.
    """
    if fanout < 1:
        raise ValueError("fanout must be >= 1")
    request = hook_request(image, family)
    per_call = SamplingParams(
        temperature=sampling.temperature,
        top_p=sampling.top_p,
        max_new_tokens=sampling.max_new_tokens,
        n_samples=1,
        want_logprobs=False,
        seed=sampling.seed,
    )
    generations = []
    for gen_index in range(fanout):
        created_at = datetime.now(timezone.utc).isoformat()
        try:
            response = gateway.send(endpoint, request, per_call)[0]
            text, finish = response.text, response.finish_reason
        except NetworkError:
            text, finish = "", FINISH_ERROR
        generations.append(
            RawGeneration(
                image_id=image.image_id,
                gen_index=gen_index,
                text=text,
                finish_reason=finish,
                created_at=created_at,
            )
        )
    return generations
