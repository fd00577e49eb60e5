"""Checkpointed, atomically committed JSONL stage storage.

While a stage runs, output lands in numbered part files (each written to a
temp path and renamed, so a kill never leaves a half-committed chunk), and a
checkpoint records how many inputs and records are committed plus a chain
hash of the committed bytes. At completion the parts concatenate into a
single stage file via one more atomic rename. Committed prefixes are never
rewritten; resume re-derives nothing before the checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator

from .errors import IntegrityError

STAGES_DIR = "stages"


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as handle:
        handle.write(data)
        handle.flush()
        os.fsync(handle.fileno())
    os.replace(tmp, path)


def dump_record(record: dict[str, Any]) -> str:
    return json.dumps(record, ensure_ascii=False, sort_keys=True)


@dataclass
class Checkpoint:
    stage: str
    committed_inputs: int = 0
    committed_records: int = 0
    parts: int = 0
    chain_hash: str = ""
    finalized: bool = False
    final_sha256: str | None = None

    def to_json(self) -> bytes:
        return (json.dumps(self.__dict__, sort_keys=True) + "\n").encode("utf-8")

    @classmethod
    def from_path(cls, path: Path) -> "Checkpoint":
        data = json.loads(path.read_text(encoding="utf-8"))
        return cls(**data)


def _chain(previous: str, chunk: bytes) -> str:
    return hashlib.sha256(previous.encode("ascii") + hashlib.sha256(chunk).digest()).hexdigest()


class StageStore:
    """All stage paths for one run directory."""

    def __init__(self, run_dir: str | Path) -> None:
        self.run_dir = Path(run_dir)
        self.stages_dir = self.run_dir / STAGES_DIR

    def final_path(self, stage: str) -> Path:
        return self.stages_dir / f"{stage}.jsonl"

    def parts_dir(self, stage: str) -> Path:
        return self.stages_dir / f"{stage}.parts"

    def checkpoint_path(self, stage: str) -> Path:
        return self.stages_dir / f"{stage}.checkpoint.json"

    def checkpoint(self, stage: str) -> Checkpoint | None:
        path = self.checkpoint_path(stage)
        if path.exists():
            return Checkpoint.from_path(path)
        return None

    def is_complete(self, stage: str) -> bool:
        checkpoint = self.checkpoint(stage)
        return bool(checkpoint and checkpoint.finalized) and self.final_path(stage).exists()

    def has_partial(self, stage: str) -> bool:
        checkpoint = self.checkpoint(stage)
        return checkpoint is not None and not checkpoint.finalized

    def any_output(self) -> bool:
        return self.stages_dir.exists() and any(self.stages_dir.iterdir())

    def read_records(self, stage: str) -> Iterator[dict[str, Any]]:
        """Stream a finalized stage file."""
        path = self.final_path(stage)
        if not path.exists():
            raise FileNotFoundError(f"stage {stage!r} has no finalized output at {path}")
        with open(path, "r", encoding="utf-8") as handle:
            for line in handle:
                line = line.strip()
                if line:
                    yield json.loads(line)

    def verify_final(self, stage: str) -> int:
        """Recompute the finalized file hash against the checkpoint.

        Returns the record count; raises IntegrityError on tampering.
        """
        checkpoint = self.checkpoint(stage)
        if checkpoint is None or not checkpoint.finalized:
            raise IntegrityError(f"stage {stage!r} is not finalized")
        data = self.final_path(stage).read_bytes()
        digest = hashlib.sha256(data).hexdigest()
        if digest != checkpoint.final_sha256:
            raise IntegrityError(
                f"stage {stage!r} content hash mismatch: file was modified after commit"
            )
        count = sum(1 for line in data.splitlines() if line.strip())
        if count != checkpoint.committed_records:
            raise IntegrityError(
                f"stage {stage!r} has {count} records, checkpoint says "
                f"{checkpoint.committed_records}"
            )
        return count


class StageWriter:
    """Chunk-at-a-time committed writer for one stage.

    Constructing a writer on a partially committed stage resumes it: the
    existing parts are verified against the checkpoint chain hash and the
    caller continues from ``committed_inputs``.
    """

    def __init__(self, store: StageStore, stage: str) -> None:
        self.store = store
        self.stage = stage
        store.stages_dir.mkdir(parents=True, exist_ok=True)
        existing = store.checkpoint(stage)
        if existing and existing.finalized:
            raise IntegrityError(f"stage {stage!r} is already finalized")
        self.checkpoint = existing or Checkpoint(stage=stage)
        self._verify_parts()
        self._drop_uncommitted_parts()

    def _part_path(self, index: int) -> Path:
        return self.store.parts_dir(self.stage) / f"{index:06d}.jsonl"

    def _verify_parts(self) -> None:
        chain = ""
        for index in range(self.checkpoint.parts):
            path = self._part_path(index)
            if not path.exists():
                raise IntegrityError(f"missing committed part {path}")
            chain = _chain(chain, path.read_bytes())
        if chain != self.checkpoint.chain_hash:
            raise IntegrityError(
                f"stage {self.stage!r} committed parts do not match checkpoint chain hash"
            )

    def _drop_uncommitted_parts(self) -> None:
        parts_dir = self.store.parts_dir(self.stage)
        if not parts_dir.exists():
            return
        for path in parts_dir.iterdir():
            index_ok = path.suffix == ".jsonl" and path.stem.isdigit()
            if not index_ok or int(path.stem) >= self.checkpoint.parts:
                path.unlink()

    @property
    def committed_inputs(self) -> int:
        return self.checkpoint.committed_inputs

    def committed_records(self) -> Iterator[dict[str, Any]]:
        for index in range(self.checkpoint.parts):
            with open(self._part_path(index), "r", encoding="utf-8") as handle:
                for line in handle:
                    line = line.strip()
                    if line:
                        yield json.loads(line)

    def commit_chunk(self, records: list[dict[str, Any]], inputs_consumed: int) -> None:
        """Atomically commit one chunk and advance the checkpoint."""
        parts_dir = self.store.parts_dir(self.stage)
        parts_dir.mkdir(parents=True, exist_ok=True)
        payload = "".join(dump_record(record) + "\n" for record in records).encode("utf-8")
        _atomic_write(self._part_path(self.checkpoint.parts), payload)
        self.checkpoint.parts += 1
        self.checkpoint.committed_inputs += inputs_consumed
        self.checkpoint.committed_records += len(records)
        self.checkpoint.chain_hash = _chain(self.checkpoint.chain_hash, payload)
        _atomic_write(self.store.checkpoint_path(self.stage), self.checkpoint.to_json())

    def finalize(self) -> Path:
        """Concatenate committed parts into the single stage file."""
        blob = b"".join(
            self._part_path(index).read_bytes() for index in range(self.checkpoint.parts)
        )
        final = self.store.final_path(self.stage)
        _atomic_write(final, blob)
        self.checkpoint.finalized = True
        self.checkpoint.final_sha256 = hashlib.sha256(blob).hexdigest()
        _atomic_write(self.store.checkpoint_path(self.stage), self.checkpoint.to_json())
        parts_dir = self.store.parts_dir(self.stage)
        if parts_dir.exists():
            for path in parts_dir.iterdir():
                path.unlink()
            parts_dir.rmdir()
        return final


def write_side_file(store: StageStore, name: str, records: list[dict[str, Any]]) -> Path:
    """Atomically write a derived (non-checkpointed) record file."""
    store.stages_dir.mkdir(parents=True, exist_ok=True)
    path = store.stages_dir / f"{name}.jsonl"
    payload = "".join(dump_record(record) + "\n" for record in records).encode("utf-8")
    _atomic_write(path, payload)
    return path


def read_side_file(store: StageStore, name: str) -> Iterator[dict[str, Any]]:
    path = store.stages_dir / f"{name}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"side file {name!r} missing at {path}")
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                yield json.loads(line)
