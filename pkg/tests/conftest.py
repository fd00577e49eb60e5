from __future__ import annotations

from pathlib import Path

import pytest

from oasis_forge.gateway import EndpointConfig, SamplingParams


@pytest.fixture
def endpoint() -> EndpointConfig:
    return EndpointConfig(
        base_url="scripted://unit",
        model_name="test-model",
        backoff_base=0.0,
        max_retries=2,
        max_concurrency=8,
    )


@pytest.fixture
def raw_endpoint(endpoint: EndpointConfig) -> EndpointConfig:
    return endpoint.with_mode("raw_completion")


@pytest.fixture
def judge_sampling() -> SamplingParams:
    return SamplingParams(temperature=0.0, top_p=1.0, max_new_tokens=512)


def write_image(directory: Path, name: str, content: bytes) -> str:
    path = directory / name
    path.write_bytes(content)
    return str(path)


@pytest.fixture
def image_file(tmp_path: Path) -> str:
    return write_image(tmp_path, "image.png", b"unit-test-image-bytes")
