"""Command-line entry point: run stages, export, inspect."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import analytics, pipeline
from .errors import ForgeError
from .pipeline import RunConfig
from .stage_io import StageStore


def _load_config(config_path: str, run_dir: str | None) -> RunConfig:
    config = RunConfig.from_file(config_path)
    if run_dir:
        from dataclasses import replace

        config = replace(config, run_dir=Path(run_dir))
    return config


def _stage_command(name: str, stage: str):
    @click.command(name=name, help=f"Run the {stage} stage (resumes from its checkpoint).")
    @click.option("--config", "config_path", required=True, type=click.Path(exists=True))
    @click.option("--run-dir", default=None, type=click.Path())
    @click.option("--limit", default=None, type=int, help="Process at most N input records.")
    @click.option("--dry-run", is_flag=True, help="Render prompts only; no network calls.")
    def command(config_path: str, run_dir: str | None, limit: int | None, dry_run: bool) -> None:
        config = _load_config(config_path, run_dir)
        if dry_run:
            for block in pipeline.dry_run(config, stage, limit or 3):
                click.echo(block)
                click.echo("-" * 60)
            return
        counts = pipeline.run_stage(
            config, stage, limit=pipeline.effective_limit(config, limit)
        )
        click.echo(f"{stage}: {json.dumps(counts, sort_keys=True)}")

    return command


@click.group()
def main() -> None:
    """Synthesize multimodal instruction-tuning data from images alone."""


main.add_command(_stage_command("synth", pipeline.STAGE_HOOK))
main.add_command(_stage_command("triage", pipeline.STAGE_TRIAGE))
main.add_command(_stage_command("qc", pipeline.STAGE_QC))
main.add_command(_stage_command("respond", pipeline.STAGE_RESPOND))
main.add_command(_stage_command("recycle", pipeline.STAGE_RECYCLE))


@main.command("run-all")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--run-dir", default=None, type=click.Path())
@click.option("--limit", default=None, type=int, help="Cap the number of source images.")
@click.option("--resume", is_flag=True, help="Continue an interrupted run directory.")
@click.option("--stop-after", default=None, type=click.Choice(pipeline.STAGE_ORDER))
def run_all(
    config_path: str,
    run_dir: str | None,
    limit: int | None,
    resume: bool,
    stop_after: str | None,
) -> None:
    """Run every stage in order and write the export file."""
    config = _load_config(config_path, run_dir)
    out = pipeline.run_all(
        config,
        limit=pipeline.effective_limit(config, limit),
        resume=resume,
        stop_after=stop_after,
    )
    click.echo(str(out))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--run-dir", default=None, type=click.Path())
@click.option("--out", "out_path", default=None, type=click.Path())
def export(config_path: str, run_dir: str | None, out_path: str | None) -> None:
    """Write the conversation-format SFT export."""
    config = _load_config(config_path, run_dir)
    click.echo(str(pipeline.export_sft(config, out_path)))


@main.command()
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--run-dir", default=None, type=click.Path(exists=True))
def report(config_path: str | None, run_dir: str | None) -> None:
    """Conservation-checked run metrics."""
    if config_path:
        target = _load_config(config_path, run_dir).run_dir
    elif run_dir:
        target = Path(run_dir)
    else:
        raise click.UsageError("pass --config or --run-dir")
    metrics = pipeline.report(target)
    click.echo(pipeline.format_report(metrics))


@main.command()
@click.argument("export_path", type=click.Path(exists=True), required=False)
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--run-dir", default=None, type=click.Path())
@click.option(
    "--detector",
    default=None,
    help="Language detector plugin as module:callable (text -> code or None).",
)
@click.option(
    "--annotator",
    default=None,
    help="Verb-object annotator plugin as module:callable (text -> pairs).",
)
@click.option("--json", "as_json", is_flag=True, help="Emit the report as JSON.")
@click.option("--out", "out_path", default=None, type=click.Path(), help="Also write the JSON report here.")
def stats(
    export_path: str | None,
    config_path: str | None,
    run_dir: str | None,
    detector: str | None,
    annotator: str | None,
    as_json: bool,
    out_path: str | None,
) -> None:
    """Corpus statistics over an export file."""
    if export_path is None:
        if config_path:
            base = _load_config(config_path, run_dir).run_dir
        elif run_dir:
            base = Path(run_dir)
        else:
            raise click.UsageError("pass an export path, --config, or --run-dir")
        export_path = str(Path(base) / pipeline.EXPORT_FILE)
    samples = pipeline.load_sft_jsonl(export_path)
    stats_block = pipeline.corpus_stats(
        samples,
        detector=_load_plugin(detector),
        annotator=_load_plugin(annotator),
    )
    if out_path:
        Path(out_path).write_text(
            json.dumps(stats_block, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    if as_json:
        click.echo(json.dumps(stats_block, indent=2, sort_keys=True))
        return
    click.echo(f"samples: {stats_block['count']}")
    for field_name in (analytics.FIELD_INSTRUCTION, analytics.FIELD_RESPONSE):
        if field_name not in stats_block:
            continue
        block = stats_block[field_name]
        click.echo(
            f"{field_name:<12} mean words {block['mean_words']:.2f} "
            f"(std {block['std_words']:.2f}, population)  "
            f"mean chars {block['mean_characters']:.2f} (std {block['std_characters']:.2f})  "
            f"ttr {block['ttr']:.6f} ({block['unique_tokens']}/{block['total_tokens']})"
        )
    if "languages" in stats_block:
        languages = stats_block["languages"]
        click.echo(f"languages ({languages['detector']}): {languages['histogram']} "
                   f"undetected={languages['undetected']}")
    for row in stats_block.get("verbs", []):
        click.echo(
            f"verb {row['verb']:<16} {row['frequency']:6.2%}  objects: "
            f"{', '.join(row['top_objects'])}"
        )


def _load_plugin(spec: str | None):
    if not spec:
        return None
    module_name, _, attr = spec.partition(":")
    if not attr:
        raise click.UsageError("plugin spec must look like module:callable")
    import importlib

    return getattr(importlib.import_module(module_name), attr)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--run-dir", default=None, type=click.Path())
def status(config_path: str, run_dir: str | None) -> None:
    """Per-stage completion and checkpoint positions."""
    config = _load_config(config_path, run_dir)
    store = StageStore(config.run_dir)
    for stage in pipeline.STAGE_ORDER:
        checkpoint = store.checkpoint(stage)
        if checkpoint is None:
            click.echo(f"{stage:<9} not started")
        elif checkpoint.finalized:
            click.echo(f"{stage:<9} complete ({checkpoint.committed_records} records)")
        else:
            click.echo(
                f"{stage:<9} partial  ({checkpoint.committed_inputs} inputs, "
                f"{checkpoint.committed_records} records committed)"
            )


def entrypoint() -> None:
    try:
        main(standalone_mode=True)
    except ForgeError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    entrypoint()
