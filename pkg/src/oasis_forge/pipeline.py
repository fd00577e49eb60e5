"""Run orchestration: manifest ingest, stage execution, export, reporting.

Stages run strictly in order (hook, triage, qc, respond, recycle); within a
stage, records process concurrently but commit in input order, so the
committed prefix is a deterministic function of the inputs. With a scripted
backend and a fixed seed, a full run (interrupted or not) produces a
byte-identical export.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field, replace
from itertools import islice
from pathlib import Path
from typing import Any, Callable, Iterator
from urllib.parse import urlparse

import yaml

from . import analytics
from .errors import (
    EmptyField,
    ImageUnreadable,
    NetworkError,
    StagePreconditionError,
)
from .gateway import (
    CHAT,
    FINISH_ERROR,
    GENERATION_SAMPLING,
    JUDGE_SAMPLING,
    RAW_COMPLETION,
    EndpointConfig,
    Gateway,
    HttpBackend,
    SamplingParams,
)
from .hooking import ImageRecord, RawGeneration, hook_request, synthesize
from .prompts import TriageKind, get_family, load_families, render_judge
from .quality import (
    DIMENSIONS,
    QcReport,
    QcThresholds,
    Verdict,
    evaluate,
    score_histogram,
)
from .recycle import (
    RecycleRules,
    RefineVerdict,
    llm_refine,
    load_instruction_list,
    pair_with_instruction,
    rule_filter,
)
from .respond import (
    Provenance,
    SftSample,
    assemble_sample,
    generate_response,
    nll_select,
    score_response,
)
from .scripted import synthetic_backend
from .stage_io import StageStore, StageWriter, read_side_file, write_side_file
from .triage import TriageOutcome, classify

STAGE_HOOK = "hook"
STAGE_TRIAGE = "triage"
STAGE_QC = "qc"
STAGE_RESPOND = "respond"
STAGE_RECYCLE = "recycle"
STAGE_ORDER = (STAGE_HOOK, STAGE_TRIAGE, STAGE_QC, STAGE_RESPOND, STAGE_RECYCLE)

CAPTIONS_SIDE_FILE = "captions"
EXPORT_FILE = "sft_export.jsonl"
METRICS_FILE = "metrics.json"

RESPONSE_QC_OFF = "off"
RESPONSE_QC_NLL = "nll"
RESPONSE_QC_SCORE = "score"

# Large-scale reference rates printed next to run diagnostics; informational
# only, never asserted.
TRIAGE_PASS_RATE_REFERENCE = 0.4990
QC_ACCEPT_RATE_REFERENCE = 0.5090

_DEFAULT_INSTRUCTIONS = Path(__file__).parent / "data" / "description_instructions.txt"


@dataclass(frozen=True)
class RunConfig:
    run_dir: Path
    manifest: Path
    endpoints: dict[str, EndpointConfig]
    template_family: str = "qwen2-vl"
    families_file: str | None = None
    seed: int = 0
    fanout: int = 1
    max_records: int | None = None
    recycle_enabled: bool = True
    response_qc: str = RESPONSE_QC_OFF
    nll_samples: int = 5
    thresholds: QcThresholds = QcThresholds()
    generation_sampling: SamplingParams = GENERATION_SAMPLING
    judge_sampling: SamplingParams = JUDGE_SAMPLING
    recycle_rules: RecycleRules = RecycleRules()
    instructions_file: Path | None = None
    image_root: Path | None = None
    checkpoint_every: int = 32
    max_instruction_chars: int = 4096
    qc_retry_unparsed: bool = False

    def __post_init__(self) -> None:
        for role in ("gen_mllm", "judge_llm"):
            if role not in self.endpoints:
                raise ValueError(f"endpoints must define {role!r}")
        if self.response_qc not in (RESPONSE_QC_OFF, RESPONSE_QC_NLL, RESPONSE_QC_SCORE):
            raise ValueError(f"unknown response_qc mode {self.response_qc!r}")
        if self.fanout < 1:
            raise ValueError("fanout must be >= 1")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")

    # Role views. The generator endpoint serves the hook in raw-completion
    # mode and response generation in chat mode; the judges always chat.
    @property
    def hook_endpoint(self) -> EndpointConfig:
        return self.endpoints["gen_mllm"].with_mode(RAW_COMPLETION)

    @property
    def respond_endpoint(self) -> EndpointConfig:
        return self.endpoints["gen_mllm"].with_mode(CHAT)

    @property
    def judge_llm(self) -> EndpointConfig:
        return self.endpoints["judge_llm"].with_mode(CHAT)

    @property
    def qc_mllm(self) -> EndpointConfig:
        endpoint = self.endpoints.get("qc_mllm")
        if endpoint is None:
            endpoint = replace(self.endpoints["gen_mllm"], name="qc_mllm")
        return endpoint.with_mode(CHAT)

    @property
    def resolved_image_root(self) -> Path:
        return self.image_root if self.image_root else self.manifest.parent

    @property
    def resolved_instructions_file(self) -> Path:
        return self.instructions_file if self.instructions_file else _DEFAULT_INSTRUCTIONS

    def family(self):
        extra = load_families(self.families_file) if self.families_file else None
        return get_family(self.template_family, extra)

    @classmethod
    def from_dict(cls, data: dict[str, Any], base_dir: Path) -> "RunConfig":
        def _path(value: Any) -> Path:
            path = Path(value)
            return path if path.is_absolute() else base_dir / path

        endpoints = {
            name: EndpointConfig(**{"name": name, **spec})
            for name, spec in (data.get("endpoints") or {}).items()
        }
        families_file = data.get("families_file")
        if families_file:
            families_file = str(_path(families_file))
        thresholds = QcThresholds(**(data.get("thresholds") or {}))
        generation_sampling = SamplingParams(
            **{"seed": data.get("seed", 0), **(data.get("generation_sampling") or {})}
        )
        judge_sampling = SamplingParams(
            **{
                "temperature": 0.0,
                "top_p": 1.0,
                "max_new_tokens": 512,
                **(data.get("judge_sampling") or {}),
            }
        )
        rules_spec = dict(data.get("recycle_rules") or {})
        for key in ("special_tokens", "placeholder_patterns"):
            if key in rules_spec:
                rules_spec[key] = tuple(rules_spec[key])
        response_qc = data.get("response_qc", RESPONSE_QC_OFF)
        if response_qc is False:  # YAML reads a bare `off` as boolean false
            response_qc = RESPONSE_QC_OFF
        return cls(
            run_dir=_path(data["run_dir"]),
            manifest=_path(data["manifest"]),
            endpoints=endpoints,
            template_family=data.get("template_family", "qwen2-vl"),
            families_file=families_file,
            seed=int(data.get("seed", 0)),
            fanout=int(data.get("fanout", 1)),
            max_records=data.get("max_records"),
            recycle_enabled=bool(data.get("recycle_enabled", True)),
            response_qc=response_qc,
            nll_samples=int(data.get("nll_samples", 5)),
            thresholds=thresholds,
            generation_sampling=generation_sampling,
            judge_sampling=judge_sampling,
            recycle_rules=RecycleRules(**rules_spec),
            instructions_file=_path(data["instructions_file"]) if data.get("instructions_file") else None,
            image_root=_path(data["image_root"]) if data.get("image_root") else None,
            checkpoint_every=int(data.get("checkpoint_every", 32)),
            max_instruction_chars=int(data.get("max_instruction_chars", 4096)),
            qc_retry_unparsed=bool(data.get("qc_retry_unparsed", False)),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        with open(path, "r", encoding="utf-8") as handle:
            data = yaml.safe_load(handle) or {}
        return cls.from_dict(data, path.parent)


class RoutingBackend:
    """Dispatch per endpoint: scripted:// URLs answer offline, the rest HTTP."""

    def __init__(self) -> None:
        self._http = HttpBackend()
        self._synthetic = synthetic_backend()

    def complete(self, endpoint, request, sampling, image_bytes):
        if urlparse(endpoint.base_url).scheme == "scripted":
            return self._synthetic.complete(endpoint, request, sampling, image_bytes)
        return self._http.complete(endpoint, request, sampling, image_bytes)


def build_gateway(config: RunConfig) -> Gateway:
    return Gateway(RoutingBackend())


# ---------------------------------------------------------------------------
# Manifest ingest
# ---------------------------------------------------------------------------


@dataclass
class IngestResult:
    records: list[ImageRecord] = field(default_factory=list)
    manifest_lines: int = 0
    malformed: int = 0
    unreadable: int = 0
    deduplicated: int = 0


def ingest_manifest(path: str | Path, image_root: Path | None = None) -> IngestResult:
    """Validate, content-hash, and dedup manifest lines, order preserved."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = image_root or path.parent
    result = IngestResult()
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            result.manifest_lines += 1
            try:
                data = json.loads(line)
                uri = data["uri"]
            except (ValueError, TypeError, KeyError):
                result.malformed += 1
                continue
            resolved = Path(uri)
            if not resolved.is_absolute():
                resolved = root / resolved
            try:
                content = resolved.read_bytes()
            except OSError:
                result.unreadable += 1
                continue
            image_id = hashlib.sha256(content).hexdigest()
            if image_id in seen:
                result.deduplicated += 1
                continue
            seen.add(image_id)
            result.records.append(
                ImageRecord(
                    image_id=image_id,
                    uri=str(resolved),
                    source_tag=str(data.get("source_tag", "")),
                )
            )
    return result


# ---------------------------------------------------------------------------
# Generic chunked stage runner
# ---------------------------------------------------------------------------


def _run_chunked(
    store: StageStore,
    stage: str,
    inputs: Iterator[Any],
    process: Callable[[Any], list[dict[str, Any]]],
    workers: int,
    chunk_size: int,
    limit: int | None,
) -> None:
    from concurrent.futures import ThreadPoolExecutor

    writer = StageWriter(store, stage)
    if limit is not None:
        inputs = islice(inputs, 0, limit)
    pending = islice(inputs, writer.committed_inputs, None)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        while True:
            chunk = list(islice(pending, chunk_size))
            if not chunk:
                break
            results = list(pool.map(process, chunk))
            records = [record for group in results for record in group]
            writer.commit_chunk(records, inputs_consumed=len(chunk))
    writer.finalize()


def _require_stage(store: StageStore, stage: str, needed_by: str) -> None:
    if not store.is_complete(stage):
        raise StagePreconditionError(
            f"stage {needed_by!r} requires finalized {stage!r} output; run that stage first"
        )


def _uri_map(store: StageStore) -> dict[str, str]:
    return {record["image_id"]: record["uri"] for record in store.read_records(STAGE_HOOK)}


# ---------------------------------------------------------------------------
# Stage implementations
# ---------------------------------------------------------------------------


def _stage_hook(config: RunConfig, store: StageStore, gateway: Gateway, limit: int | None) -> None:
    ingest = ingest_manifest(config.manifest, config.resolved_image_root)
    _merge_metrics(
        config.run_dir,
        {
            "ingest": {
                "manifest_lines": ingest.manifest_lines,
                "malformed": ingest.malformed,
                "unreadable": ingest.unreadable,
                "deduplicated": ingest.deduplicated,
                "images": len(ingest.records),
            }
        },
    )
    family = config.family()
    endpoint = config.hook_endpoint

    def process(image: ImageRecord) -> list[dict[str, Any]]:
        try:
            generations = synthesize(
                gateway, image, family, endpoint, config.generation_sampling, config.fanout
            )
        except ImageUnreadable as exc:
            generations = [
                RawGeneration(
                    image_id=image.image_id,
                    gen_index=index,
                    text="",
                    finish_reason=FINISH_ERROR,
                    created_at="",
                )
                for index in range(config.fanout)
            ]
            return [
                {**_gen_record(gen, image), "error": str(exc)} for gen in generations
            ]
        return [_gen_record(gen, image) for gen in generations]

    _run_chunked(
        store,
        STAGE_HOOK,
        iter(ingest.records),
        process,
        workers=endpoint.max_concurrency,
        chunk_size=config.checkpoint_every,
        limit=limit,
    )


def _gen_record(gen: RawGeneration, image: ImageRecord) -> dict[str, Any]:
    return {
        "image_id": gen.image_id,
        "gen_index": gen.gen_index,
        "uri": image.uri,
        "source_tag": image.source_tag,
        "text": gen.text,
        "finish_reason": gen.finish_reason,
        "created_at": gen.created_at,
    }


def _stage_triage(config: RunConfig, store: StageStore, gateway: Gateway, limit: int | None) -> None:
    _require_stage(store, STAGE_HOOK, STAGE_TRIAGE)
    judge = config.judge_llm

    def process(record: dict[str, Any]) -> list[dict[str, Any]]:
        gen = RawGeneration(
            image_id=record["image_id"],
            gen_index=record["gen_index"],
            text=record["text"],
            finish_reason=record["finish_reason"],
            created_at=record["created_at"],
        )
        outcome = classify(
            gateway, gen, judge, config.judge_sampling, config.max_instruction_chars
        )
        return [_triage_record(outcome)]

    _run_chunked(
        store,
        STAGE_TRIAGE,
        store.read_records(STAGE_HOOK),
        process,
        workers=judge.max_concurrency,
        chunk_size=config.checkpoint_every,
        limit=limit,
    )

    _write_captions_side_file(store)


def _write_captions_side_file(store: StageStore) -> None:
    """Caption queue for the recycle stage: original generation text keyed by
    (image_id, gen_index). Deterministically derived, so safe to rebuild."""
    caption_keys = {
        (record["image_id"], record["gen_index"])
        for record in store.read_records(STAGE_TRIAGE)
        if record["kind"] == TriageKind.CAPTION.value
    }
    captions = [
        {
            "image_id": record["image_id"],
            "gen_index": record["gen_index"],
            "text": record["text"],
        }
        for record in store.read_records(STAGE_HOOK)
        if (record["image_id"], record["gen_index"]) in caption_keys
    ]
    write_side_file(store, CAPTIONS_SIDE_FILE, captions)


def _triage_record(outcome: TriageOutcome) -> dict[str, Any]:
    return {
        "image_id": outcome.image_id,
        "gen_index": outcome.gen_index,
        "kind": outcome.kind.value,
        "instruction_text": outcome.instruction_text,
        "raw_judge_text": outcome.raw_judge_text,
        "error": outcome.error,
    }


def _stage_qc(config: RunConfig, store: StageStore, gateway: Gateway, limit: int | None) -> None:
    _require_stage(store, STAGE_TRIAGE, STAGE_QC)
    uris = _uri_map(store)
    mllm, llm = config.qc_mllm, config.judge_llm

    def process(record: dict[str, Any]) -> list[dict[str, Any]]:
        image = ImageRecord(image_id=record["image_id"], uri=uris[record["image_id"]])
        report = evaluate(
            gateway,
            record["instruction_text"],
            image,
            record["gen_index"],
            mllm,
            llm,
            config.judge_sampling,
            config.thresholds,
            retry_unparsed=config.qc_retry_unparsed,
        )
        return [
            {
                "image_id": report.image_id,
                "gen_index": report.gen_index,
                "instruction": record["instruction_text"],
                "solvability": report.solvability,
                "clarity": report.clarity,
                "hallucination": report.hallucination,
                "nonsense": report.nonsense,
                "verdict": report.verdict.value,
                "reject_reason": report.reject_reason.value if report.reject_reason else None,
            }
        ]

    instructions = (
        record
        for record in store.read_records(STAGE_TRIAGE)
        if record["kind"] == TriageKind.INSTRUCTION.value
    )
    _run_chunked(
        store,
        STAGE_QC,
        instructions,
        process,
        workers=mllm.max_concurrency,
        chunk_size=config.checkpoint_every,
        limit=limit,
    )


def _stage_respond(config: RunConfig, store: StageStore, gateway: Gateway, limit: int | None) -> None:
    _require_stage(store, STAGE_QC, STAGE_RESPOND)
    uris = _uri_map(store)
    endpoint = config.respond_endpoint

    if config.response_qc == RESPONSE_QC_NLL:
        sampling = replace(
            config.generation_sampling, n_samples=config.nll_samples, want_logprobs=True
        )
    else:
        sampling = replace(config.generation_sampling, n_samples=1, want_logprobs=False)

    def process(record: dict[str, Any]) -> list[dict[str, Any]]:
        image = ImageRecord(image_id=record["image_id"], uri=uris[record["image_id"]])
        qc_report = QcReport(
            image_id=record["image_id"],
            gen_index=record["gen_index"],
            solvability=record["solvability"],
            clarity=record["clarity"],
            hallucination=record["hallucination"],
            nonsense=record["nonsense"],
            verdict=Verdict(record["verdict"]),
        )
        out = {
            "image_id": record["image_id"],
            "gen_index": record["gen_index"],
            "instruction": record["instruction"],
            "provenance": Provenance.OASIS_INSTRUCTION.value,
            "qc": {dim: record[dim] for dim in DIMENSIONS} | {"verdict": record["verdict"]},
            "response": "",
            "status": "ok",
            "avg_nll": None,
            "response_scores": None,
        }
        try:
            candidates = generate_response(
                gateway, image, record["instruction"], endpoint, sampling
            )
        except NetworkError as exc:
            out["status"] = "failed"
            out["error"] = str(exc)
            return [out]

        if config.response_qc == RESPONSE_QC_NLL:
            chosen = nll_select(candidates)
            out["avg_nll"] = chosen.avg_nll
        else:
            chosen = candidates[0]

        if not chosen.text:
            out["status"] = "failed"
            out["error"] = "empty response"
            return [out]

        sample = assemble_sample(
            record["image_id"],
            record["instruction"],
            chosen.text,
            Provenance.OASIS_INSTRUCTION,
            qc=qc_report,
        )
        out["response"] = sample.response

        if config.response_qc == RESPONSE_QC_SCORE:
            scores = score_response(
                gateway, image, record["instruction"], chosen.text, config.qc_mllm,
                config.judge_sampling,
            )
            out["response_scores"] = {
                "helpfulness": scores.helpfulness,
                "truthfulness": scores.truthfulness,
                "instruction_following": scores.instruction_following,
            }
            if not scores.full_marks:
                out["status"] = "dropped"
        return [out]

    accepted = (
        record
        for record in store.read_records(STAGE_QC)
        if record["verdict"] == Verdict.ACCEPT.value
    )
    _run_chunked(
        store,
        STAGE_RESPOND,
        accepted,
        process,
        workers=endpoint.max_concurrency,
        chunk_size=config.checkpoint_every,
        limit=limit,
    )


def _stage_recycle(config: RunConfig, store: StageStore, gateway: Gateway, limit: int | None) -> None:
    _require_stage(store, STAGE_TRIAGE, STAGE_RECYCLE)
    if not (store.stages_dir / f"{CAPTIONS_SIDE_FILE}.jsonl").exists():
        _write_captions_side_file(store)
    instructions = load_instruction_list(str(config.resolved_instructions_file))
    judge = config.judge_llm

    def process(record: dict[str, Any]) -> list[dict[str, Any]]:
        candidate = rule_filter(
            record["image_id"], record["gen_index"], record["text"], config.recycle_rules
        )
        out = {
            "image_id": candidate.image_id,
            "gen_index": candidate.gen_index,
            "caption": candidate.text,
            "rule_flags": sorted(flag.value for flag in candidate.rule_flags),
            "status": "",
            "instruction": None,
            "response": None,
            "provenance": Provenance.RECYCLED_CAPTION.value,
        }
        if not candidate.passes_rules:
            out["status"] = "rule_rejected"
            return [out]
        verdict = llm_refine(gateway, candidate, judge, config.judge_sampling)
        if verdict is RefineVerdict.INVALID:
            out["status"] = "invalid"
            return [out]
        if verdict is RefineVerdict.DROP:
            out["status"] = "llm_dropped"
            return [out]
        sample = pair_with_instruction(candidate, instructions, config.seed)
        out["status"] = "kept"
        out["instruction"] = sample.instruction
        out["response"] = sample.response
        return [out]

    _run_chunked(
        store,
        STAGE_RECYCLE,
        read_side_file(store, CAPTIONS_SIDE_FILE),
        process,
        workers=judge.max_concurrency,
        chunk_size=config.checkpoint_every,
        limit=limit,
    )


_STAGE_IMPLS = {
    STAGE_HOOK: _stage_hook,
    STAGE_TRIAGE: _stage_triage,
    STAGE_QC: _stage_qc,
    STAGE_RESPOND: _stage_respond,
    STAGE_RECYCLE: _stage_recycle,
}


def run_stage(
    config: RunConfig,
    stage: str,
    gateway: Gateway | None = None,
    limit: int | None = None,
) -> dict[str, Any]:
    """Run (or resume) one stage; a finalized stage is a no-op.

    Returns the stage's recomputed counter block.
    """
    if stage not in _STAGE_IMPLS:
        raise ValueError(f"unknown stage {stage!r}")
    store = StageStore(config.run_dir)
    if store.is_complete(stage):
        return _stage_counts(store, stage)
    gateway = gateway or build_gateway(config)

    started = time.monotonic()
    roles = _stage_roles(config, stage)
    usage_before = {role: gateway.usage(endpoint) for role, endpoint in roles.items()}
    _STAGE_IMPLS[stage](config, store, gateway, limit)
    elapsed = time.monotonic() - started

    counts = _stage_counts(store, stage)
    tokens = {}
    for role, endpoint in roles.items():
        after = gateway.usage(endpoint)
        before = usage_before[role]
        delta = {
            "requests": after.requests - before.requests,
            "prompt_tokens": after.prompt_tokens - before.prompt_tokens,
            "completion_tokens": after.completion_tokens - before.completion_tokens,
        }
        if any(delta.values()):
            tokens[role] = delta
    _merge_metrics(
        config.run_dir,
        {"stages": {stage: {**counts, "wall_clock_s": round(elapsed, 3)}}, "tokens": tokens},
    )
    return counts


def _stage_roles(config: RunConfig, stage: str) -> dict[str, EndpointConfig]:
    """Endpoints a stage talks to, for per-role token accounting."""
    if stage == STAGE_HOOK:
        return {"gen_mllm": config.hook_endpoint}
    if stage == STAGE_TRIAGE or stage == STAGE_RECYCLE:
        return {"judge_llm": config.judge_llm}
    if stage == STAGE_QC:
        return {"qc_mllm": config.qc_mllm, "judge_llm": config.judge_llm}
    if stage == STAGE_RESPOND:
        roles = {"gen_mllm": config.respond_endpoint}
        if config.response_qc == RESPONSE_QC_SCORE:
            roles["qc_mllm"] = config.qc_mllm
        return roles
    return {}


def run_all(
    config: RunConfig,
    gateway: Gateway | None = None,
    limit: int | None = None,
    resume: bool = False,
    stop_after: str | None = None,
) -> Path:
    """Run every stage in order and export; returns the export path."""
    store = StageStore(config.run_dir)
    if store.any_output() and not resume:
        raise StagePreconditionError(
            f"run dir {config.run_dir} already has stage output; pass resume=True "
            "to continue it or use a fresh directory"
        )
    gateway = gateway or build_gateway(config)
    stages = [STAGE_HOOK, STAGE_TRIAGE, STAGE_QC, STAGE_RESPOND]
    if config.recycle_enabled:
        stages.append(STAGE_RECYCLE)
    for stage in stages:
        run_stage(config, stage, gateway, limit=limit if stage == STAGE_HOOK else None)
        if stop_after == stage:
            return config.run_dir / EXPORT_FILE
    return export_sft(config)


def effective_limit(config: RunConfig, cli_limit: int | None) -> int | None:
    if cli_limit is not None:
        return cli_limit
    return config.max_records


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def _normalized_instruction(text: str) -> str:
    return " ".join(text.casefold().split())


def export_sft(config: RunConfig, out_path: str | Path | None = None) -> Path:
    """Write the conversation-format export, deterministically ordered.

    One line per sample: ``{"id", "image", "conversations"}`` with the human
    turn prefixed ``<image>\\n``. Duplicate (image, normalized instruction)
    pairs collapse to the first in (image_id, gen_index, provenance) order.
    """
    store = StageStore(config.run_dir)
    _require_stage(store, STAGE_RESPOND, "export")
    uris = _uri_map(store)
    root = config.resolved_image_root

    rows: list[tuple[str, int, str, str, str]] = []
    for record in store.read_records(STAGE_RESPOND):
        if record["status"] == "ok":
            rows.append(
                (
                    record["image_id"],
                    record["gen_index"],
                    record["provenance"],
                    record["instruction"],
                    record["response"],
                )
            )
    if config.recycle_enabled and store.is_complete(STAGE_RECYCLE):
        for record in store.read_records(STAGE_RECYCLE):
            if record["status"] == "kept":
                rows.append(
                    (
                        record["image_id"],
                        record["gen_index"],
                        record["provenance"],
                        record["instruction"],
                        record["response"],
                    )
                )
    rows.sort(key=lambda row: (row[0], row[1], row[2]))

    seen: set[tuple[str, str]] = set()
    lines = []
    for image_id, gen_index, provenance, instruction, response in rows:
        key = (image_id, _normalized_instruction(instruction))
        if key in seen:
            continue
        seen.add(key)
        suffix = "-cap" if provenance == Provenance.RECYCLED_CAPTION.value else ""
        uri = uris.get(image_id, "")
        try:
            image_path = os.path.relpath(uri, root) if uri else ""
        except ValueError:  # different drive on windows
            image_path = uri
        lines.append(
            json.dumps(
                {
                    "id": f"{image_id}-{gen_index}{suffix}",
                    "image": image_path,
                    "conversations": [
                        {"from": "human", "value": "<image>\n" + instruction},
                        {"from": "gpt", "value": response},
                    ],
                },
                ensure_ascii=False,
            )
        )

    out = Path(out_path) if out_path else config.run_dir / EXPORT_FILE
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".tmp")
    tmp.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    os.replace(tmp, out)
    return out


def load_sft_jsonl(path: str | Path) -> list[SftSample]:
    """Parse an export file back into samples (round-trip check and stats)."""
    samples = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            data = json.loads(line)
            human, gpt = data["conversations"][0], data["conversations"][1]
            if human["from"] != "human" or gpt["from"] != "gpt":
                raise EmptyField(f"malformed conversation roles in {data['id']}")
            value = human["value"]
            instruction = value[len("<image>\n") :] if value.startswith("<image>\n") else value
            provenance = (
                Provenance.RECYCLED_CAPTION
                if data["id"].endswith("-cap")
                else Provenance.OASIS_INSTRUCTION
            )
            samples.append(
                SftSample(
                    image_id=data["id"],
                    instruction=instruction,
                    response=gpt["value"],
                    provenance=provenance,
                )
            )
    return samples


# ---------------------------------------------------------------------------
# Metrics and report
# ---------------------------------------------------------------------------


def _metrics_path(run_dir: Path) -> Path:
    return Path(run_dir) / METRICS_FILE


def _merge_metrics(run_dir: Path, update: dict[str, Any]) -> None:
    """Counts are replaced; wall clock and token usage accumulate across sessions."""
    path = _metrics_path(run_dir)
    current: dict[str, Any] = {}
    if path.exists():
        current = json.loads(path.read_text(encoding="utf-8"))
    if "ingest" in update:
        current["ingest"] = update["ingest"]
    for stage, block in (update.get("stages") or {}).items():
        previous = current.setdefault("stages", {}).get(stage, {})
        wall = previous.get("wall_clock_s", 0.0) + block.get("wall_clock_s", 0.0)
        current["stages"][stage] = {**block, "wall_clock_s": round(wall, 3)}
    for role, usage in (update.get("tokens") or {}).items():
        bucket = current.setdefault("tokens", {}).setdefault(role, {})
        for key, value in usage.items():
            bucket[key] = bucket.get(key, 0) + value
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(current, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _stage_counts(store: StageStore, stage: str) -> dict[str, Any]:
    """Recount a finalized stage from its committed records."""
    records = list(store.read_records(stage))
    if stage == STAGE_HOOK:
        errored = sum(1 for r in records if r["finish_reason"] == FINISH_ERROR)
        return {"in": len(records), "out": len(records) - errored, "errored": errored, "filtered": 0}
    if stage == STAGE_TRIAGE:
        kinds = {"instruction": 0, "caption": 0, "malformed": 0}
        errored = 0
        for record in records:
            if record["error"]:
                errored += 1
            else:
                kinds[record["kind"]] += 1
        return {
            "in": len(records),
            "out": kinds["instruction"],
            "errored": errored,
            "filtered": kinds["caption"] + kinds["malformed"],
            "instruction": kinds["instruction"],
            "caption": kinds["caption"],
            "malformed": kinds["malformed"] + errored,
        }
    if stage == STAGE_QC:
        verdicts = {"accept": 0, "reject": 0, "invalid": 0}
        reasons: dict[str, int] = {}
        for record in records:
            verdicts[record["verdict"]] += 1
            if record["reject_reason"]:
                reasons[record["reject_reason"]] = reasons.get(record["reject_reason"], 0) + 1
        return {
            "in": len(records),
            "out": verdicts["accept"],
            "errored": 0,
            "filtered": verdicts["reject"] + verdicts["invalid"],
            **verdicts,
            "reject_reasons": dict(sorted(reasons.items())),
        }
    if stage == STAGE_RESPOND:
        status = {"ok": 0, "failed": 0, "dropped": 0}
        for record in records:
            status[record["status"]] += 1
        return {
            "in": len(records),
            "out": status["ok"],
            "errored": status["failed"],
            "filtered": status["dropped"],
        }
    if stage == STAGE_RECYCLE:
        status = {"kept": 0, "rule_rejected": 0, "llm_dropped": 0, "invalid": 0}
        for record in records:
            status[record["status"]] += 1
        return {
            "in": len(records),
            "out": status["kept"],
            "errored": 0,
            "filtered": status["rule_rejected"] + status["llm_dropped"] + status["invalid"],
            **status,
        }
    raise ValueError(f"unknown stage {stage!r}")


@dataclass
class RunMetrics:
    stages: dict[str, dict[str, Any]]
    triage_pass_rate: float | None
    qc_acceptance_rate: float | None
    recycle_yield: float | None
    qc_score_histogram: dict[str, dict[str, int]]
    tokens: dict[str, dict[str, int]]
    wall_clock_s: dict[str, float]


def report(run_dir: str | Path, config: RunConfig | None = None) -> RunMetrics:
    """Conservation-checked metrics recomputed from committed stage files."""
    run_dir = Path(run_dir)
    store = StageStore(run_dir)
    stored: dict[str, Any] = {}
    metrics_path = _metrics_path(run_dir)
    if metrics_path.exists():
        stored = json.loads(metrics_path.read_text(encoding="utf-8"))

    stages: dict[str, dict[str, Any]] = {}
    for stage in STAGE_ORDER:
        if not store.is_complete(stage):
            continue
        store.verify_final(stage)
        counts = _stage_counts(store, stage)
        if counts["in"] != counts["out"] + counts["errored"] + counts["filtered"]:
            raise StagePreconditionError(
                f"conservation violated in stage {stage!r}: {counts}"
            )
        stages[stage] = counts

    triage = stages.get(STAGE_TRIAGE, {})
    instruction = triage.get("instruction", 0)
    caption = triage.get("caption", 0)
    pass_rate = instruction / (instruction + caption) if (instruction + caption) else None

    qc = stages.get(STAGE_QC, {})
    qc_rate = qc["out"] / qc["in"] if qc.get("in") else None

    recycle = stages.get(STAGE_RECYCLE, {})
    recycle_yield = recycle["out"] / recycle["in"] if recycle.get("in") else None

    histogram: dict[str, dict[str, int]] = {}
    if store.is_complete(STAGE_QC):
        reports = [
            QcReport(
                image_id=r["image_id"],
                gen_index=r["gen_index"],
                solvability=r["solvability"],
                clarity=r["clarity"],
                hallucination=r["hallucination"],
                nonsense=r["nonsense"],
                verdict=Verdict(r["verdict"]),
            )
            for r in store.read_records(STAGE_QC)
        ]
        histogram = score_histogram(reports)

    wall_clock = {
        stage: block.get("wall_clock_s", 0.0)
        for stage, block in (stored.get("stages") or {}).items()
    }
    return RunMetrics(
        stages=stages,
        triage_pass_rate=pass_rate,
        qc_acceptance_rate=qc_rate,
        recycle_yield=recycle_yield,
        qc_score_histogram=histogram,
        tokens=stored.get("tokens", {}),
        wall_clock_s=wall_clock,
    )


def format_report(metrics: RunMetrics) -> str:
    """Aligned plain-text report for the terminal."""
    lines = ["stage      in      out     errored  filtered"]
    for stage in STAGE_ORDER:
        if stage in metrics.stages:
            block = metrics.stages[stage]
            lines.append(
                f"{stage:<9}{block['in']:>7}{block['out']:>9}{block['errored']:>9}"
                f"{block['filtered']:>10}"
            )
    if metrics.triage_pass_rate is not None:
        lines.append(
            f"triage pass rate:   {metrics.triage_pass_rate:7.2%}   "
            f"(reference {TRIAGE_PASS_RATE_REFERENCE:.2%}, diagnostic only, not a target)"
        )
    if metrics.qc_acceptance_rate is not None:
        lines.append(
            f"qc acceptance rate: {metrics.qc_acceptance_rate:7.2%}   "
            f"(reference {QC_ACCEPT_RATE_REFERENCE:.2%}, diagnostic only, not a target)"
        )
    if metrics.recycle_yield is not None:
        lines.append(f"recycle yield:      {metrics.recycle_yield:7.2%}")
    if metrics.qc_score_histogram:
        lines.append("qc score histogram (1..5 / unparsed):")
        for dim, counts in metrics.qc_score_histogram.items():
            row = " ".join(f"{counts[str(v)]:>6}" for v in range(1, 6))
            lines.append(f"  {dim:<14}{row}  {counts['unparsed']:>6}")
    for role, usage in sorted(metrics.tokens.items()):
        lines.append(
            f"tokens[{role}]: requests={usage.get('requests', 0)} "
            f"prompt={usage.get('prompt_tokens', 0)} completion={usage.get('completion_tokens', 0)}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Dry run
# ---------------------------------------------------------------------------


def dry_run(config: RunConfig, stage: str, limit: int = 3) -> list[str]:
    """Render the prompts a stage would send, without any network calls."""
    store = StageStore(config.run_dir)
    rendered: list[str] = []
    if stage == STAGE_HOOK:
        ingest = ingest_manifest(config.manifest, config.resolved_image_root)
        family = config.family()
        for image in ingest.records[:limit]:
            request = hook_request(image, family)
            rendered.append(f"[hook {image.image_id[:12]}] {request.payload!r} + image {image.uri}")
    elif stage == STAGE_TRIAGE:
        for record in islice(store.read_records(STAGE_HOOK), limit):
            if record["text"]:
                rendered.append(render_judge("categorize", record["text"]))
    elif stage == STAGE_QC:
        instructions = (
            r
            for r in store.read_records(STAGE_TRIAGE)
            if r["kind"] == TriageKind.INSTRUCTION.value
        )
        for record in islice(instructions, limit):
            for dim in DIMENSIONS:
                rendered.append(render_judge(dim, record["instruction_text"]))
    elif stage == STAGE_RESPOND:
        accepted = (
            r for r in store.read_records(STAGE_QC) if r["verdict"] == Verdict.ACCEPT.value
        )
        for record in islice(accepted, limit):
            rendered.append(f"[respond {record['image_id'][:12]}] {record['instruction']}")
    elif stage == STAGE_RECYCLE:
        for record in islice(read_side_file(store, CAPTIONS_SIDE_FILE), limit):
            rendered.append(render_judge("caption_refine", record["text"]))
    else:
        raise ValueError(f"unknown stage {stage!r}")
    return rendered


def corpus_stats(
    samples: list[SftSample],
    detector: analytics.LanguageDetector | None = None,
    annotator: analytics.VerbObjectAnnotator | None = None,
) -> dict[str, Any]:
    """Bundle the standard corpus measurements for both text fields."""
    out: dict[str, Any] = {"count": len(samples)}
    if not samples:
        return out
    for field_name in (analytics.FIELD_INSTRUCTION, analytics.FIELD_RESPONSE):
        stats_words = analytics.length_stats(samples, field_name, analytics.UNIT_WORDS)
        stats_chars = analytics.length_stats(samples, field_name, analytics.UNIT_CHARACTERS)
        ratio = analytics.ttr(samples, field_name)
        out[field_name] = {
            "mean_words": stats_words.mean,
            "std_words": stats_words.std_dev,
            "mean_characters": stats_chars.mean,
            "std_characters": stats_chars.std_dev,
            "ttr": ratio.ratio,
            "unique_tokens": ratio.unique_tokens,
            "total_tokens": ratio.total_tokens,
        }
    if detector is not None:
        breakdown = analytics.language_breakdown(samples, detector)
        out["languages"] = {
            "histogram": breakdown.histogram,
            "undetected": breakdown.undetected,
            "detector": breakdown.detector_name,
        }
    if annotator is not None:
        out["verbs"] = [
            {
                "verb": row.verb,
                "top_objects": list(row.top_objects),
                "frequency": row.frequency,
            }
            for row in analytics.verb_object_summary(samples, annotator)
        ]
    return out
