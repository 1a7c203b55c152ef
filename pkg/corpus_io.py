"""Validated JSONL reading and writing for corpora, metrics and eval logs."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union


class CorpusError(RuntimeError):
    """A corpus file is missing, unreadable, unwritable or of the wrong schema."""


@dataclass(frozen=True)
class BucketSummary:
    """Kept/dropped counts for one task kind + difficulty combination."""

    task_kind: str
    difficulty: int
    total: int
    kept: int
    dropped: int
    keep_rate: float


@dataclass(frozen=True)
class CorpusSummary:
    """Overall filter outcome of a corpus file."""

    total_records: int
    total_kept: int
    total_dropped: int
    keep_rate: float
    drop_reasons: Dict[str, int] = field(default_factory=dict)
    by_bucket: List[BucketSummary] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "total_records": self.total_records,
            "total_kept": self.total_kept,
            "total_dropped": self.total_dropped,
            "keep_rate": self.keep_rate,
            "drop_reasons": dict(sorted(self.drop_reasons.items())),
            "by_bucket": [asdict(bucket) for bucket in self.by_bucket],
        }


def dumps_line(row: Dict[str, Any]) -> str:
    """Canonical one-line JSON: sorted keys, no padding."""
    return json.dumps(row, sort_keys=True, separators=(",", ":"))


def write_jsonl(path: Union[str, Path], rows: Iterable[Dict[str, Any]]) -> Path:
    """Write rows one per line; the only writer of a given file."""
    out = Path(path)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            for row in rows:
                fh.write(dumps_line(row) + "\n")
    except OSError as exc:
        raise CorpusError(f"Cannot write {out}: {exc}") from exc
    return out


class JsonlReader:
    """Reads JSONL files produced by this package, skipping malformed lines."""

    _VALID_EXTENSIONS = {".jsonl"}

    def __init__(self) -> None:
        self.logger = logging.getLogger("pcl.corpus_io")

    def validate_path(self, file_path: Union[str, Path]) -> Optional[Path]:
        """Resolve a JSONL path, or None when it is not a readable .jsonl file."""
        path = Path(file_path)
        if path.suffix not in self._VALID_EXTENSIONS:
            self.logger.error("Not a .jsonl corpus file: %s", path)
            return None
        if not path.is_file():
            self.logger.warning("Corpus file not found: %s", path)
            return None
        return path.resolve()

    def read(self, file_path: Union[str, Path]) -> List[Dict[str, Any]]:
        """Rows of a JSONL file; empty when the path is invalid."""
        path = self.validate_path(file_path)
        if path is None:
            return []
        return self._read_jsonl(path)

    def _read_jsonl(self, path: Path) -> List[Dict[str, Any]]:
        entries: List[Dict[str, Any]] = []
        try:
            with open(path, "r", encoding="utf-8") as fh:
                for line_num, line in enumerate(fh, 1):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        entry = json.loads(line)
                    except json.JSONDecodeError:
                        self.logger.warning("Skipping malformed JSON at %s:%d", path, line_num)
                        continue
                    if not isinstance(entry, dict):
                        self.logger.warning("Skipping non-object JSON at %s:%d", path, line_num)
                        continue
                    entries.append(entry)
        except OSError as exc:
            self.logger.error("Failed to read %s: %s", path, exc)
        return entries


def summarize_rows(rows: Iterable[Dict[str, Any]]) -> CorpusSummary:
    buckets: Dict[str, Dict[str, Any]] = {}
    reasons: Dict[str, int] = {}

    for row in rows:
        task = row.get("task") or {}
        kind = str(task.get("task_kind", "unknown"))
        difficulty = int(task.get("difficulty", 0))
        key = f"{kind}|{difficulty}"
        if key not in buckets:
            buckets[key] = {"task_kind": kind, "difficulty": difficulty, "kept": 0, "dropped": 0}
        if row.get("kept") is True:
            buckets[key]["kept"] += 1
        else:
            buckets[key]["dropped"] += 1
            reason = str(row.get("drop_reason", "unknown"))
            reasons[reason] = reasons.get(reason, 0) + 1

    by_bucket = []
    total_kept = 0
    total_dropped = 0
    for key in sorted(buckets):
        data = buckets[key]
        k = data["kept"]
        d = data["dropped"]
        total_kept += k
        total_dropped += d
        by_bucket.append(
            BucketSummary(
                task_kind=data["task_kind"],
                difficulty=data["difficulty"],
                total=k + d,
                kept=k,
                dropped=d,
                keep_rate=k / (k + d) if k + d > 0 else 0.0,
            )
        )

    grand_total = total_kept + total_dropped
    return CorpusSummary(
        total_records=grand_total,
        total_kept=total_kept,
        total_dropped=total_dropped,
        keep_rate=total_kept / grand_total if grand_total > 0 else 0.0,
        drop_reasons=reasons,
        by_bucket=by_bucket,
    )
