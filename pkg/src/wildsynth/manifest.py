"""Append-only run manifest.

One JSON record per line, written atomically (single write + fsync) so
a killed run leaves at most one torn final line, which readers drop.
Three record kinds:

- ``header``: run-level provenance (seed, RNG name, params fingerprint,
  template version), written once per run id.
- ``attempt``: journal marker appended before a backend call; a
  dangling attempt (no matching result) marks a step interrupted
  mid-call, and resume will not re-send it.
- ``result``: the durable per-variant entry with the QC verdict;
  (run_id, base_image_id, order_index) is unique among results.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from .errors import ManifestCorruptError

STATUS_PASS = "pass"
STATUS_FAIL = "fail"
STATUS_ERROR = "error"
STATUS_INTERRUPTED = "interrupted"

VERDICT_STATUSES = (STATUS_PASS, STATUS_FAIL)


@dataclass(frozen=True)
class ManifestEntry:
    run_id: str
    timestamp: str
    base_image_id: str
    order_index: int
    severity: str
    species: str
    day_night: str
    backend_id: str
    status: str
    reason: str
    gate_path: str
    raw_mae: Optional[float]
    norm_mae: Optional[float]
    ssim: Optional[float]
    mask_area_fraction: Optional[float]
    params_fingerprint: str
    seed: int

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.run_id, self.base_image_id, self.order_index)

    @property
    def has_verdict(self) -> bool:
        return self.status in VERDICT_STATUSES


@dataclass
class ManifestState:
    headers: list[dict]
    results: dict[tuple[str, str, int], ManifestEntry]
    attempts: set[tuple[str, str, int]]
    entries: list[ManifestEntry]  # results in file order

    def dangling_attempts(self) -> set[tuple[str, str, int]]:
        return {key for key in self.attempts if key not in self.results}


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class ManifestWriter:
    """Serialized appender; safe to share across worker threads."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def _append(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True) + "\n"
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())

    def append_header(
        self,
        run_id: str,
        seed: int,
        generator: str,
        params_fingerprint: str,
        template_version: str,
    ) -> None:
        self._append(
            {
                "kind": "header",
                "run_id": run_id,
                "timestamp": utc_now(),
                "seed": seed,
                "generator": generator,
                "params_fingerprint": params_fingerprint,
                "template_version": template_version,
            }
        )

    def append_attempt(self, run_id: str, base_image_id: str, order_index: int) -> None:
        self._append(
            {
                "kind": "attempt",
                "run_id": run_id,
                "timestamp": utc_now(),
                "base_image_id": base_image_id,
                "order_index": order_index,
            }
        )

    def append_result(self, entry: ManifestEntry) -> None:
        record = {"kind": "result", **asdict(entry)}
        self._append(record)


def read_manifest(path: str | Path) -> ManifestState:
    """Parse a manifest, tolerating only a torn final line.

    Any other malformed line aborts with instructions: the file is
    append-only, so recovery is truncating it back to the last good
    line and re-running (completed steps are skipped on resume).
    """
    state = ManifestState(headers=[], results={}, attempts=set(), entries=[])
    file_path = Path(path)
    if not file_path.exists():
        return state
    with open(file_path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    # A trailing newline yields one empty tail element; drop it.
    if lines and lines[-1] == "":
        lines.pop()
    for lineno, line in enumerate(lines, start=1):
        try:
            record = json.loads(line)
            if not isinstance(record, dict):
                raise ValueError("record is not an object")
        except ValueError as exc:
            if lineno == len(lines):
                break  # torn final line from a killed run
            raise ManifestCorruptError(
                f"{file_path}:{lineno}: unparseable manifest line ({exc}). "
                f"Recover by truncating the file to its first {lineno - 1} lines "
                "and re-running; completed steps resume without re-sending."
            ) from exc
        kind = record.get("kind")
        if kind == "header":
            state.headers.append(record)
        elif kind == "attempt":
            state.attempts.add(
                (record["run_id"], record["base_image_id"], int(record["order_index"]))
            )
        elif kind == "result":
            record.pop("kind")
            try:
                entry = ManifestEntry(**record)
            except TypeError as exc:
                raise ManifestCorruptError(
                    f"{file_path}:{lineno}: result record has wrong fields: {exc}"
                ) from exc
            state.results[entry.key] = entry
            state.entries.append(entry)
        else:
            raise ManifestCorruptError(
                f"{file_path}:{lineno}: unknown record kind {kind!r}"
            )
    return state


def load_entries(path: str | Path) -> list[ManifestEntry]:
    """Result entries in file order (the report module's input)."""
    return read_manifest(path).entries
