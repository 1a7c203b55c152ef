"""Corpus construction: teacher demonstrations, the validation filter, splits.

Dropped records stay in the corpus with ``kept=false`` so the filter can be
audited; training selects kept records itself.
"""

from __future__ import annotations

import json
import logging
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from corpus_io import CorpusError, CorpusSummary, JsonlReader, summarize_rows, write_jsonl
from rewards import accuracy_reward, format_reward_full
from seeding import derive_seed
from seqformat import ParseFailure, PCLSequence, RenderMode, contains_all_sections, parse, render
from tasks import TaskInstance, TaskKind, TeacherConfig, gen_instance, oracle_reasoning, teacher_generate

__all__ = [
    "CORPUS_SCHEMA_VERSION",
    "CorpusError",
    "CorpusRecord",
    "CorpusStats",
    "DropReason",
    "build_corpus",
    "load_corpus",
    "make_record",
    "split",
    "validate_sample",
    "validate_tokens",
]

logger = logging.getLogger("pcl.datagen")

CORPUS_SCHEMA_VERSION = 1
SPLIT_NAMES = ("train", "dev", "test")


class DropReason(str, Enum):
    NONE = "none"
    INCONSISTENT_SELFEVAL = "inconsistent_selfeval"
    MALFORMED_FORMAT = "malformed_format"
    UNPARSEABLE_REWARD = "unparseable_reward"


@dataclass(frozen=True)
class CorpusRecord:
    """One corpus line: a task, its two training targets and the filter verdict."""

    id: str
    task: TaskInstance
    reasoning_tokens: Optional[Tuple[int, ...]]
    full_tokens: Optional[Tuple[int, ...]]
    true_rewards: Tuple[float, float]
    kept: bool
    drop_reason: DropReason = DropReason.NONE

    def __post_init__(self) -> None:
        object.__setattr__(self, "drop_reason", DropReason(self.drop_reason))
        if self.kept != (self.drop_reason is DropReason.NONE):
            raise ValueError(f"Record {self.id}: kept={self.kept} with drop_reason={self.drop_reason.value}")
        if self.kept and self.full_tokens is None:
            raise ValueError(f"Record {self.id}: kept records need full_tokens")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": CORPUS_SCHEMA_VERSION,
            "id": self.id,
            "task": self.task.to_dict(),
            "reasoning_tokens": None if self.reasoning_tokens is None else list(self.reasoning_tokens),
            "full_tokens": None if self.full_tokens is None else list(self.full_tokens),
            "true_rewards": list(self.true_rewards),
            "kept": self.kept,
            "drop_reason": self.drop_reason.value,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CorpusRecord":
        version = data.get("schema_version")
        if version != CORPUS_SCHEMA_VERSION:
            raise CorpusError(f"Unsupported corpus schema_version {version!r}")
        reasoning = data.get("reasoning_tokens")
        full = data.get("full_tokens")
        rewards = data["true_rewards"]
        return cls(
            id=str(data["id"]),
            task=TaskInstance.from_dict(data["task"]),
            reasoning_tokens=None if reasoning is None else tuple(int(t) for t in reasoning),
            full_tokens=None if full is None else tuple(int(t) for t in full),
            true_rewards=(float(rewards[0]), float(rewards[1])),
            kept=bool(data["kept"]),
            drop_reason=DropReason(data["drop_reason"]),
        )


@dataclass(frozen=True)
class CorpusStats:
    """What build_corpus wrote and how the filter decided."""

    corpus_path: Path
    stats_path: Path
    n: int
    seed: int
    summary: CorpusSummary
    teacher: Dict[str, Any] = field(default_factory=dict)

    @property
    def kept(self) -> int:
        return self.summary.total_kept

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": CORPUS_SCHEMA_VERSION,
            "corpus": self.corpus_path.name,
            "n": self.n,
            "seed": self.seed,
            "teacher": self.teacher,
            **self.summary.to_dict(),
        }


def true_rewards_of(seq: PCLSequence, ground_truth: str) -> Tuple[float, float]:
    """Recomputed (accuracy, format) for a teacher sample."""
    r_a = float(accuracy_reward(seq.text("answer"), ground_truth))
    if seq.reward_pred is None:
        return r_a, 0.0
    return r_a, float(format_reward_full(render(seq, RenderMode.FULL)))


def validate_sample(seq: PCLSequence, gt: str) -> Tuple[bool, DropReason]:
    """Keep a sample iff its claimed scores equal the recomputed ones.

    Whether the answer is right does not matter, only the honesty of the
    self-assessment and the well-formedness of the four sections.
    """
    if seq.evaluation is None or seq.reward_tokens is None:
        return False, DropReason.MALFORMED_FORMAT
    if seq.reward_pred is None:
        return False, DropReason.UNPARSEABLE_REWARD
    if not contains_all_sections(render(seq, RenderMode.FULL)):
        return False, DropReason.MALFORMED_FORMAT
    if seq.reward_pred != true_rewards_of(seq, gt):
        return False, DropReason.INCONSISTENT_SELFEVAL
    return True, DropReason.NONE


def validate_tokens(tokens: Sequence[int], gt: str) -> Tuple[bool, DropReason]:
    seq = parse(tokens)
    if isinstance(seq, ParseFailure):
        return False, DropReason.MALFORMED_FORMAT
    return validate_sample(seq, gt)


def make_record(index: int, inst: TaskInstance, teacher_cfg: TeacherConfig, seed: int) -> CorpusRecord:
    think, answer = oracle_reasoning(inst)
    gold = PCLSequence.from_text(inst.question, think, answer)
    seq = teacher_generate(inst, teacher_cfg)
    kept, reason = validate_sample(seq, inst.ground_truth)
    full = render(seq, RenderMode.FULL) if seq.reward_pred is not None else None
    return CorpusRecord(
        id=f"pcl-{seed}-{index:07d}",
        task=inst,
        reasoning_tokens=tuple(render(gold, RenderMode.REASONING_ONLY)),
        full_tokens=None if full is None else tuple(full),
        true_rewards=true_rewards_of(seq, inst.ground_truth),
        kept=kept,
        drop_reason=reason,
    )


def _instance_for(index: int, kinds: Sequence[TaskKind], difficulties: Sequence[int], seed: int) -> TaskInstance:
    # round-robin over the mix so every requested bucket is populated
    kind = kinds[index % len(kinds)]
    difficulty = difficulties[(index // len(kinds)) % len(difficulties)]
    return gen_instance(derive_seed(seed, "instance", index), kind, difficulty)


def _build_range(
    start: int,
    stop: int,
    kinds: Tuple[TaskKind, ...],
    difficulties: Tuple[int, ...],
    teacher_cfg: TeacherConfig,
    seed: int,
) -> List[Dict[str, Any]]:
    return [
        make_record(i, _instance_for(i, kinds, difficulties, seed), teacher_cfg, seed).to_dict()
        for i in range(start, stop)
    ]


def build_corpus(
    out_path: Union[str, Path],
    n: int,
    kinds: Sequence[Union[TaskKind, str]] = (TaskKind.MIXED,),
    difficulties: Sequence[int] = (2,),
    teacher_cfg: Optional[TeacherConfig] = None,
    seed: int = 0,
    workers: int = 1,
) -> CorpusStats:
    """Generate, validate and write ``n`` records plus a ``.stats.json`` report."""
    if not isinstance(n, int) or n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    kind_mix = tuple(TaskKind(k) for k in kinds)
    difficulty_mix = tuple(int(d) for d in difficulties)
    if not kind_mix or not difficulty_mix:
        raise ValueError("kinds and difficulties must be non-empty")
    for difficulty in difficulty_mix:
        gen_instance(0, kind_mix[0], difficulty)
    teacher_cfg = teacher_cfg or TeacherConfig(seed=seed)

    if workers == 1:
        rows = _build_range(0, n, kind_mix, difficulty_mix, teacher_cfg, seed)
    else:
        chunk = -(-n // workers)
        bounds = [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]
        logger.info("Building %d records on %d workers", n, len(bounds))
        rows = []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_build_range, lo, hi, kind_mix, difficulty_mix, teacher_cfg, seed)
                for lo, hi in bounds
            ]
            for future in futures:
                rows.extend(future.result())

    corpus_path = write_jsonl(out_path, rows)
    summary = summarize_rows(rows)
    stats = CorpusStats(
        corpus_path=corpus_path,
        stats_path=corpus_path.with_suffix(".stats.json"),
        n=n,
        seed=seed,
        summary=summary,
        teacher={
            "answer_corruption_rate": teacher_cfg.answer_corruption_rate,
            "selfeval_corruption_rate": teacher_cfg.selfeval_corruption_rate,
            "seed": teacher_cfg.seed,
        },
    )
    try:
        stats.stats_path.write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"Cannot write {stats.stats_path}: {exc}") from exc
    logger.info(
        "Corpus %s: %d records, %d kept, drops %s",
        corpus_path,
        summary.total_records,
        summary.total_kept,
        summary.drop_reasons,
    )
    return stats


def load_corpus(path: Union[str, Path]) -> List[CorpusRecord]:
    """Load records; unreadable lines are skipped, a bad path is an error."""
    reader = JsonlReader()
    if reader.validate_path(path) is None:
        raise CorpusError(f"Corpus not found or invalid: {path}")
    records = []
    for row in reader.read(path):
        try:
            records.append(CorpusRecord.from_dict(row))
        except CorpusError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            logger.warning("Skipping invalid record %s in %s: %s", row.get("id", "?"), path, exc)
    return records


def _split_sizes(n: int, fractions: Sequence[float]) -> List[int]:
    sizes = [int(round(f * n)) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    if sizes[-1] < 0:
        raise ValueError(f"Fractions {list(fractions)} overflow {n} records")
    return sizes


def split(
    corpus_path: Union[str, Path],
    fractions: Sequence[float],
    seed: int,
    out_dir: Optional[Union[str, Path]] = None,
) -> Dict[str, Path]:
    """Partition a corpus by shuffled id into train/dev/test files.

    Two fractions give train/test, three give train/dev/test. Records keep
    their corpus order inside each split.
    """
    fractions = [float(f) for f in fractions]
    if len(fractions) not in (2, 3):
        raise ValueError(f"Expected 2 or 3 fractions, got {len(fractions)}")
    if any(not 0.0 < f < 1.0 for f in fractions):
        raise ValueError(f"Degenerate split fractions: {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"Split fractions must sum to 1, got {sum(fractions)}")

    reader = JsonlReader()
    source = reader.validate_path(corpus_path)
    if source is None:
        raise CorpusError(f"Corpus not found or invalid: {corpus_path}")
    rows = reader.read(source)
    ids = sorted(str(row["id"]) for row in rows)
    if len(set(ids)) != len(ids):
        raise CorpusError(f"Duplicate record ids in {corpus_path}")

    random.Random(derive_seed(seed, "split")).shuffle(ids)
    names = SPLIT_NAMES if len(fractions) == 3 else ("train", "test")
    assignment: Dict[str, str] = {}
    offset = 0
    for name, size in zip(names, _split_sizes(len(ids), fractions)):
        for record_id in ids[offset : offset + size]:
            assignment[record_id] = name
        offset += size

    target = Path(out_dir) if out_dir is not None else source.parent
    paths = {}
    for name in names:
        paths[name] = write_jsonl(target / f"{name}.jsonl", (r for r in rows if assignment[str(r["id"])] == name))
    logger.info("Split %s into %s", source, {n: sum(1 for v in assignment.values() if v == n) for n in names})
    return paths
