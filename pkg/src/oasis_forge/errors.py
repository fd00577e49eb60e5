"""Exception types shared across the pipeline."""

from __future__ import annotations


class ForgeError(Exception):
    """Base class for all oasis-forge errors."""


class NetworkError(ForgeError):
    """Transport failure (timeouts, connection errors, 5xx, 429 exhausted)."""


class AuthError(ForgeError):
    """Credential rejected (401/403). Never retried."""


class BadRequestError(ForgeError):
    """Endpoint rejected the request body (non-auth 4xx). Never retried."""


class SchemaError(ForgeError):
    """Response body could not be parsed into the expected shape."""


class LogprobsUnavailable(ForgeError):
    """Logprobs were requested but the backend returned none."""


class ScriptMiss(ForgeError):
    """Scripted backend saw a fingerprint it has no entry for (strict mode)."""


class ImageUnreadable(ForgeError):
    """Image uri could not be read; raised before any network call."""


class JudgeUnavailable(ForgeError):
    """Judge endpoint failed after retries; record keeps error provenance."""


class MissingNll(ForgeError):
    """NLL selection requires every candidate to carry avg_nll."""


class EmptyField(ForgeError):
    """A sample field that must be nonempty was empty."""


class EmptyCorpus(ForgeError):
    """Analytics over an empty corpus."""


class EmptyList(ForgeError):
    """Instruction list required for recycling is empty."""


class UnknownPromptId(ForgeError):
    """No judge prompt registered under this id."""


class StagePreconditionError(ForgeError):
    """A stage was started without its required inputs."""


class IntegrityError(ForgeError):
    """Committed run data does not match its recorded hashes or counts."""
