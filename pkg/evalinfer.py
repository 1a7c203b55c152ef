"""Inference with the ``<post-completion>`` stop rule, evaluation and reports."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from corpus_io import write_jsonl
from datagen import load_corpus
from model import TinyDecoder, sample
from rewards import RewardFlags, accuracy_reward, extract_answer, format_reward_reasoning, total_reward
from schedules import method_names, resolve
from seqformat import EOS_ID, POST_COMPLETION_ID, prompt_tokens
from tasks import TaskInstance

logger = logging.getLogger("pcl.evalinfer")

INFERENCE_STOPS = frozenset({POST_COMPLETION_ID, EOS_ID})
FULL_STOPS = frozenset({EOS_ID})
_ALL_FLAGS = RewardFlags(acc=True, fmt_r=True, fmt_e=True, con=True)


@dataclass(frozen=True)
class InferResult:
    answer: str
    n_tokens: int
    tokens: Tuple[int, ...]


def _generate(
    model: TinyDecoder, question: str, stops: frozenset, max_new: Optional[int]
) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    prompt = tuple(prompt_tokens(question))
    budget = model.config.context_length - len(prompt)
    limit = budget if max_new is None else min(max_new, budget)
    result = sample(model, prompt, stops, limit, greedy=True)
    return prompt, result.tokens


def infer(model: TinyDecoder, question: str, max_new: Optional[int] = None) -> InferResult:
    """Deployment path: greedy decoding that stops at ``<post-completion>``."""
    prompt, tokens = _generate(model, question, INFERENCE_STOPS, max_new)
    return InferResult(answer=extract_answer(prompt + tokens), n_tokens=len(tokens), tokens=tokens)


def generate_full(model: TinyDecoder, question: str, max_new: Optional[int] = None) -> Tuple[int, ...]:
    """Training-time path: greedy decoding through the reflection region to EOS."""
    _, tokens = _generate(model, question, FULL_STOPS, max_new)
    return tokens


@dataclass(frozen=True)
class SelfAssessmentStats:
    full_format_rate: float
    mean_consistency: float
    selfeval_valid_rate: float
    mean_full_tokens: float
    n_items: int


@dataclass(frozen=True)
class EvalReport:
    """Test-set outcome of one trained model."""

    method: str
    accuracy: float
    reasoning_format_rate: float
    mean_generated_tokens: float
    n_items: int
    self_assessment: Optional[SelfAssessmentStats] = None
    seeds: Tuple[int, ...] = ()
    wall_time: float = 0.0
    error: Optional[str] = None

    def __post_init__(self) -> None:
        for name in ("accuracy", "reasoning_format_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["seeds"] = list(self.seeds)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvalReport":
        stats = data.get("self_assessment")
        return cls(
            method=data["method"],
            accuracy=float(data["accuracy"]),
            reasoning_format_rate=float(data["reasoning_format_rate"]),
            mean_generated_tokens=float(data["mean_generated_tokens"]),
            n_items=int(data["n_items"]),
            self_assessment=None if stats is None else SelfAssessmentStats(**stats),
            seeds=tuple(int(s) for s in data.get("seeds", ())),
            wall_time=float(data.get("wall_time", 0.0)),
            error=data.get("error"),
        )

    @classmethod
    def failed(cls, method: str, seeds: Sequence[int], error: str) -> "EvalReport":
        return cls(method, 0.0, 0.0, 0.0, 0, seeds=tuple(seeds), error=error)


def load_testset(path: Union[str, Path]) -> List[TaskInstance]:
    return [record.task for record in load_corpus(path)]


def evaluate(
    model: TinyDecoder,
    testset: Sequence[TaskInstance],
    method: str = "",
    log_path: Optional[Union[str, Path]] = None,
    seeds: Sequence[int] = (),
    max_new: Optional[int] = None,
) -> EvalReport:
    """Greedy accuracy over a test set; per-item rows go to ``log_path``."""
    if not testset:
        raise ValueError("Empty test set")
    started = time.monotonic()
    rows = []
    for inst in testset:
        result = infer(model, inst.question, max_new)
        full = tuple(prompt_tokens(inst.question)) + result.tokens
        rows.append(
            {
                "question": inst.question,
                "ground_truth": inst.ground_truth,
                "generated": list(result.tokens),
                "answer": result.answer,
                "correct": accuracy_reward(result.answer, inst.ground_truth),
                "fmt_reason": format_reward_reasoning(full),
                "n_tokens": result.n_tokens,
            }
        )
    if log_path is not None:
        write_jsonl(log_path, rows)
    report = EvalReport(
        method=method,
        accuracy=float(np.mean([row["correct"] for row in rows])),
        reasoning_format_rate=float(np.mean([row["fmt_reason"] for row in rows])),
        mean_generated_tokens=float(np.mean([row["n_tokens"] for row in rows])),
        n_items=len(rows),
        seeds=tuple(seeds),
        wall_time=time.monotonic() - started,
    )
    logger.info("Evaluated %s on %d items: accuracy %.4f", method or "model", len(rows), report.accuracy)
    return report


def _assess(full_sequences: Sequence[Sequence[int]], truths: Sequence[str], generated: Sequence[int]) -> SelfAssessmentStats:
    breakdowns = [total_reward(tokens, gt, _ALL_FLAGS) for tokens, gt in zip(full_sequences, truths)]
    return SelfAssessmentStats(
        full_format_rate=float(np.mean([b.r_f_eval for b in breakdowns])),
        mean_consistency=float(np.mean([b.r_c if b.r_c is not None else 0.0 for b in breakdowns])),
        selfeval_valid_rate=float(np.mean([b.selfeval_valid for b in breakdowns])),
        mean_full_tokens=float(np.mean(generated)),
        n_items=len(breakdowns),
    )


def eval_self_assessment(
    model: TinyDecoder,
    testset: Sequence[TaskInstance],
    log_path: Optional[Union[str, Path]] = None,
    max_new: Optional[int] = None,
) -> SelfAssessmentStats:
    """Generate past ``<post-completion>`` and score the model's own reward claims."""
    if not testset:
        raise ValueError("Empty test set")
    fulls, counts, rows = [], [], []
    for inst in testset:
        tokens = generate_full(model, inst.question, max_new)
        full = tuple(prompt_tokens(inst.question)) + tokens
        fulls.append(full)
        counts.append(len(tokens))
        rows.append({"question": inst.question, "ground_truth": inst.ground_truth, "generated": list(tokens)})
    if log_path is not None:
        write_jsonl(log_path, rows)
    return _assess(fulls, [inst.ground_truth for inst in testset], counts)


def replay(full_sequences: Sequence[Sequence[int]], truths: Sequence[str], prompt_lengths: Sequence[int]) -> SelfAssessmentStats:
    """Self-assessment stats of given sequences, no generation involved."""
    if not full_sequences:
        raise ValueError("Nothing to replay")
    counts = [len(seq) - n for seq, n in zip(full_sequences, prompt_lengths)]
    return _assess(full_sequences, truths, counts)


@dataclass
class ReportTable:
    text: str
    csv_text: str
    rows: List[Dict[str, Any]] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)


CSV_COLUMNS = (
    "method",
    "seeds",
    "accuracy",
    "accuracy_std",
    "reasoning_format_rate",
    "mean_generated_tokens",
    "full_format_rate",
    "mean_consistency",
    "status",
)
_TARGET = "PCL (Complete)"
_BASELINES = ("SFT", "SFT+RL")


def _aggregate(method: str, reports: Sequence[EvalReport]) -> Dict[str, Any]:
    ok = [r for r in reports if r.error is None]
    seeds = sorted(s for r in reports for s in r.seeds)
    row: Dict[str, Any] = {column: "" for column in CSV_COLUMNS}
    row.update(method=method, seeds=" ".join(str(s) for s in seeds))
    if not ok:
        row["status"] = "failed"
        return row
    accuracies = [r.accuracy for r in ok]
    row.update(
        accuracy=float(np.mean(accuracies)),
        accuracy_std=float(np.std(accuracies)),
        reasoning_format_rate=float(np.mean([r.reasoning_format_rate for r in ok])),
        mean_generated_tokens=float(np.mean([r.mean_generated_tokens for r in ok])),
        status="ok" if len(ok) == len(reports) else f"partial ({len(reports) - len(ok)} failed)",
    )
    assessed = [r.self_assessment for r in ok if r.self_assessment is not None]
    if assessed:
        row["full_format_rate"] = float(np.mean([s.full_format_rate for s in assessed]))
        row["mean_consistency"] = float(np.mean([s.mean_consistency for s in assessed]))
    return row


def _cell(value: Any) -> str:
    return f"{value:.4f}" if isinstance(value, float) else str(value)


def report_table(reports: Sequence[EvalReport]) -> ReportTable:
    """Rows in matrix order (seeds pooled per method) plus improvement rows."""
    if not reports:
        raise ValueError("No reports to tabulate")
    grouped: Dict[str, List[EvalReport]] = {}
    for report in reports:
        grouped.setdefault(resolve(report.method).method, []).append(report)
    order = [name for name in method_names() if name in grouped]
    rows = [_aggregate(name, grouped[name]) for name in order]

    by_method = {row["method"]: row for row in rows if row["status"] != "failed"}
    notes: List[str] = []
    target = _TARGET if _TARGET in by_method else (order[-1] if order[-1] in by_method else None)
    if target is None:
        notes.append("No successful target row; improvement rows omitted")
    else:
        for baseline in _BASELINES:
            if baseline not in by_method:
                notes.append(f"Baseline {baseline} missing; improvement vs. {baseline} omitted")
                continue
            delta: Dict[str, Any] = {column: "" for column in CSV_COLUMNS}
            delta.update(
                method=f"Improvement vs. {baseline}",
                accuracy=by_method[target]["accuracy"] - by_method[baseline]["accuracy"],
                status=f"{target} - {baseline}",
            )
            rows.append(delta)

    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({key: _cell(value) for key, value in row.items()})

    widths = {c: max(len(c), *(len(_cell(row[c])) for row in rows)) for c in CSV_COLUMNS}
    lines = ["  ".join(c.ljust(widths[c]) for c in CSV_COLUMNS)]
    lines.append("  ".join("-" * widths[c] for c in CSV_COLUMNS))
    for row in rows:
        lines.append("  ".join(_cell(row[c]).ljust(widths[c]) for c in CSV_COLUMNS))
    lines.extend(f"note: {note}" for note in notes)
    return ReportTable(text="\n".join(lines) + "\n", csv_text=buffer.getvalue(), rows=rows, notes=notes)
