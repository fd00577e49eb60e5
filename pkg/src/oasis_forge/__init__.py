"""oasis-forge: multimodal instruction-tuning data synthesis from images alone."""

from .gateway import (
    EndpointConfig,
    Gateway,
    ModelRequest,
    ModelResponse,
    SamplingParams,
    request_fingerprint,
)
from .hooking import ImageRecord, RawGeneration, synthesize
from .pipeline import RunConfig, export_sft, ingest_manifest, report, run_all, run_stage
from .prompts import TemplateFamily, parse_category, parse_score, render_hook, render_judge
from .quality import QcReport, QcThresholds, Verdict, evaluate, verdict_oracle
from .respond import Provenance, ResponseCandidate, SftSample, nll_select
from .scripted import ScriptedBackend, synthetic_backend
from .triage import TriageOutcome, classify

__version__ = "0.1.0"

__all__ = [
    "EndpointConfig",
    "Gateway",
    "ImageRecord",
    "ModelRequest",
    "ModelResponse",
    "Provenance",
    "QcReport",
    "QcThresholds",
    "RawGeneration",
    "ResponseCandidate",
    "RunConfig",
    "SamplingParams",
    "ScriptedBackend",
    "SftSample",
    "TemplateFamily",
    "TriageOutcome",
    "Verdict",
    "classify",
    "evaluate",
    "export_sft",
    "ingest_manifest",
    "nll_select",
    "parse_category",
    "parse_score",
    "render_hook",
    "render_judge",
    "report",
    "request_fingerprint",
    "run_all",
    "run_stage",
    "scripted_backend",
    "synthesize",
    "synthetic_backend",
    "verdict_oracle",
]


def scripted_backend(script, default=None, strict: bool = True) -> ScriptedBackend:
    """Build a deterministic canned backend keyed by request fingerprint."""
    if not script and default is None:
        raise ValueError("script must be nonempty (or provide a default)")
    return ScriptedBackend(script=script, default=default, strict=strict)
