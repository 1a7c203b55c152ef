"""Synthetic arithmetic tasks and the programmatic teacher.

The teacher writes PCL demonstrations: an oracle column-arithmetic
transcript, an evaluation that re-derives the result, and the scores it
claims. Corruption knobs produce wrong answers and dishonest
self-assessments for exercising the validation filter.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass
from enum import Enum
from typing import List, Tuple

from rewards import accuracy_reward, format_reward_full
from seeding import derive_seed
from seqformat import PCLSequence, RenderMode, render

logger = logging.getLogger("pcl.tasks")

MIN_DIFFICULTY = 1
MAX_DIFFICULTY = 4


class TaskKind(str, Enum):
    ADDITION = "addition"
    SUBTRACTION = "subtraction"
    MIXED = "mixed-two-step"


@dataclass(frozen=True)
class TaskInstance:
    """One arithmetic problem with its canonical answer."""

    question: str
    ground_truth: str
    operands: Tuple[int, ...]
    operators: Tuple[str, ...]
    task_kind: TaskKind
    difficulty: int
    seed: int

    @property
    def expression(self) -> str:
        return self.question[: -len("=?")]

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "ground_truth": self.ground_truth,
            "operands": list(self.operands),
            "operators": list(self.operators),
            "task_kind": self.task_kind.value,
            "difficulty": self.difficulty,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TaskInstance":
        return cls(
            question=str(data["question"]),
            ground_truth=str(data["ground_truth"]),
            operands=tuple(int(v) for v in data["operands"]),
            operators=tuple(str(v) for v in data["operators"]),
            task_kind=TaskKind(data["task_kind"]),
            difficulty=int(data["difficulty"]),
            seed=int(data["seed"]),
        )


@dataclass(frozen=True)
class TeacherConfig:
    """Corruption rates for teacher demonstrations."""

    answer_corruption_rate: float = 0.0
    selfeval_corruption_rate: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("answer_corruption_rate", "selfeval_corruption_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")


@dataclass(frozen=True)
class TeacherDraws:
    """Random decisions the teacher takes for one instance."""

    corrupt_answer: bool
    corrupt_selfeval: bool
    answer_offset: int


def _apply(x: int, op: str, y: int) -> int:
    return x + y if op == "+" else x - y


def _digits(value: int) -> List[int]:
    return [int(ch) for ch in reversed(str(value))]


def _add_columns(x: int, y: int) -> List[str]:
    xs, ys = _digits(x), _digits(y)
    lines = []
    carry = 0
    for i in range(max(len(xs), len(ys))):
        dx = xs[i] if i < len(xs) else 0
        dy = ys[i] if i < len(ys) else 0
        total = dx + dy + carry
        terms = f"{dx}+{dy}" + (f"+{carry}" if carry else "")
        carry = total // 10
        lines.append(f"{terms}={total} c{carry}")
    return lines


def _sub_columns(x: int, y: int) -> List[str]:
    """Column subtraction for x >= y >= 0, borrows shown."""
    xs, ys = _digits(x), _digits(y)
    lines = []
    borrow = 0
    for i in range(len(xs)):
        dx = xs[i]
        dy = ys[i] if i < len(ys) else 0
        value = dx - dy - borrow
        owes = 1 if value < 0 else 0
        top = dx + 10 * owes
        terms = f"{top}-{dy}" + ("-1" if borrow else "")
        lines.append(f"{terms}={value + 10 * owes} b{owes}")
        borrow = owes
    return lines


def _step_lines(x: int, op: str, y: int) -> Tuple[List[str], int]:
    """Transcript of one binary step ending with its summary line."""
    value = _apply(x, op, y)
    if x >= 0 and op == "+":
        lines = _add_columns(x, y)
    elif x >= 0:
        lines = _sub_columns(x, y) if x >= y else [f"{y}-{x}"] + _sub_columns(y, x)
    elif op == "+":
        m = -x
        lines = [f"{y}-{m}"] + _sub_columns(y, m) if y >= m else [f"{m}-{y}"] + _sub_columns(m, y)
    else:
        m = -x
        lines = [f"{m}+{y}"] + _add_columns(m, y)
    lines.append(f"{x}{op}{y}={value}")
    return lines, value


def _operand(rng: random.Random, difficulty: int) -> int:
    low = 0 if difficulty == 1 else 10 ** (difficulty - 1)
    return rng.randint(low, 10**difficulty - 1)


def gen_instance(seed: int, kind: TaskKind, difficulty: int) -> TaskInstance:
    """Deterministic task for (seed, kind, difficulty)."""
    kind = TaskKind(kind)
    if not isinstance(difficulty, int) or not MIN_DIFFICULTY <= difficulty <= MAX_DIFFICULTY:
        raise ValueError(f"difficulty must be in {MIN_DIFFICULTY}..{MAX_DIFFICULTY}, got {difficulty}")

    rng = random.Random(derive_seed(seed, "task", kind.value, difficulty))
    if kind is TaskKind.ADDITION:
        operators: Tuple[str, ...] = ("+",)
    elif kind is TaskKind.SUBTRACTION:
        operators = ("-",)
    else:
        operators = rng.choice((("+", "-"), ("-", "+")))
    operands = tuple(_operand(rng, difficulty) for _ in range(len(operators) + 1))

    value = operands[0]
    expression = str(operands[0])
    for op, operand in zip(operators, operands[1:]):
        value = _apply(value, op, operand)
        expression += f"{op}{operand}"
    return TaskInstance(
        question=f"{expression}=?",
        ground_truth=str(value),
        operands=operands,
        operators=operators,
        task_kind=kind,
        difficulty=difficulty,
        seed=seed,
    )


def oracle_reasoning(inst: TaskInstance) -> Tuple[str, str]:
    """Column-by-column transcript and the exact answer."""
    lines, value = _step_lines(inst.operands[0], inst.operators[0], inst.operands[1])
    if len(inst.operators) > 1:
        for op, operand in zip(inst.operators[1:], inst.operands[2:]):
            step, value = _step_lines(value, op, operand)
            lines.extend(step)
        lines.append(f"{inst.expression}={value}")
    return "\n".join(lines), str(value)


def evaluation_text(inst: TaskInstance, answer: str, claimed: Tuple[float, float]) -> str:
    """Three-line self-evaluation: recompute, compare, format check."""
    verdict = "same" if claimed[0] >= 1.0 else "diff"
    return "\n".join(
        (
            f"{inst.expression}={inst.ground_truth}",
            f"{answer} {verdict} {inst.ground_truth} acc {claimed[0]:.1f}",
            f"all parts fmt {claimed[1]:.1f}",
        )
    )


def teacher_draws(inst: TaskInstance, cfg: TeacherConfig) -> TeacherDraws:
    rng = random.Random(
        derive_seed(cfg.seed, "teacher", inst.task_kind.value, inst.difficulty, inst.seed)
    )
    corrupt_answer = rng.random() < cfg.answer_corruption_rate
    corrupt_selfeval = rng.random() < cfg.selfeval_corruption_rate
    offset = rng.randint(1, 9) * rng.choice((-1, 1))
    return TeacherDraws(corrupt_answer, corrupt_selfeval, offset)


def teacher_generate(inst: TaskInstance, cfg: TeacherConfig) -> PCLSequence:
    """Full PCL demonstration for one instance."""
    think, answer = oracle_reasoning(inst)
    draws = teacher_draws(inst, cfg)
    if draws.corrupt_answer:
        answer = str(int(inst.ground_truth) + draws.answer_offset)

    true_acc = float(accuracy_reward(answer, inst.ground_truth))
    draft = PCLSequence.from_text(
        inst.question, think, answer, evaluation_text(inst, answer, (true_acc, 1.0)), (true_acc, 1.0)
    )
    true_fmt = float(format_reward_full(render(draft, RenderMode.FULL)))

    claimed_acc = 1.0 - true_acc if draws.corrupt_selfeval else true_acc
    claimed = (claimed_acc, true_fmt)
    return PCLSequence.from_text(
        inst.question, think, answer, evaluation_text(inst, answer, claimed), claimed
    )
