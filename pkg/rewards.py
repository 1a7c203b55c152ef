"""Accuracy, format and consistency rewards plus total-reward assembly."""

from __future__ import annotations

import logging
import re
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple

from seqformat import (
    VOCAB,
    ParseFailure,
    PCLSequence,
    contains_all_sections,
    parse,
    parse_scores,
    reasoning_prefix,
)

logger = logging.getLogger("pcl.rewards")

_INTEGER = re.compile(r"([+-]?)0*([0-9]+)")

Scores = Tuple[float, float]


@dataclass(frozen=True)
class RewardFlags:
    """Which reward columns of a training row are switched on."""

    acc: bool = True
    fmt_r: bool = True
    fmt_e: bool = True
    con: bool = True

    def any(self) -> bool:
        return self.acc or self.fmt_r or self.fmt_e or self.con

    def enabled(self) -> Tuple[str, ...]:
        return tuple(name for name, on in asdict(self).items() if on)

    def to_dict(self) -> Dict[str, bool]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RewardFlags":
        return cls(**{name: bool(data.get(name, False)) for name in ("acc", "fmt_r", "fmt_e", "con")})


@dataclass(frozen=True)
class RewardBreakdown:
    """Per-sample reward components.

    ``r_c`` is None when consistency is disabled or the reward section could
    not be parsed; ``selfeval_valid`` tells the two apart.
    """

    r_a: int
    r_f_reason: int
    r_f_eval: int
    r_c: Optional[float]
    total: float
    selfeval_valid: bool = False
    flags: RewardFlags = field(default_factory=RewardFlags)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "r_a": self.r_a,
            "r_f_reason": self.r_f_reason,
            "r_f_eval": self.r_f_eval,
            "r_c": self.r_c,
            "total": self.total,
            "selfeval_valid": self.selfeval_valid,
            "flags": self.flags.to_dict(),
        }


def normalize_answer(text: str) -> str:
    """Trim, drop leading zeros, canonicalise the sign of integer answers."""
    stripped = text.strip()
    match = _INTEGER.fullmatch(stripped)
    if match is None:
        return stripped
    sign, digits = match.groups()
    if sign == "-" and digits != "0":
        return "-" + digits
    return digits


def accuracy_reward(answer: str, ground_truth: str) -> int:
    return int(normalize_answer(answer) == normalize_answer(ground_truth))


def format_reward_reasoning(tokens: Sequence[int]) -> int:
    """1 iff a non-empty think and answer are closed by ``<post-completion>``."""
    seq = parse(reasoning_prefix(tokens))
    if isinstance(seq, ParseFailure) or seq.has_reflection:
        return 0
    return int(len(seq.think) > 0 and len(seq.answer) > 0)


def format_reward_full(tokens: Sequence[int]) -> int:
    return int(contains_all_sections(tokens))


def parse_predicted_rewards(seq: PCLSequence) -> Optional[Scores]:
    """The model's own (accuracy, format) scores, or None if unparseable."""
    if seq.reward_tokens is None:
        return None
    return parse_scores(VOCAB.decode(seq.reward_tokens))


def consistency_reward(pred: Scores, true: Scores) -> float:
    """1 minus the mean absolute error between predicted and true scores."""
    for value in (*pred, *true):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"Score out of range [0, 1]: {value}")
    distance = abs(pred[0] - true[0]) + abs(pred[1] - true[1])
    return 1.0 - distance / 2.0


def extract_answer(tokens: Sequence[int]) -> str:
    """Answer text of the reasoning region, or "" when it does not parse."""
    seq = parse(reasoning_prefix(tokens))
    if isinstance(seq, ParseFailure):
        return ""
    return seq.text("answer")


def total_reward(tokens: Sequence[int], ground_truth: str, flags: RewardFlags) -> RewardBreakdown:
    """Score one full token list under the enabled reward columns."""
    if not flags.any():
        raise ValueError("At least one reward flag must be enabled")

    r_a = accuracy_reward(extract_answer(tokens), ground_truth)
    r_f_reason = format_reward_reasoning(tokens)
    r_f_eval = format_reward_full(tokens)

    r_c: Optional[float] = None
    selfeval_valid = False
    if flags.con:
        seq = parse(tokens)
        pred = None if isinstance(seq, ParseFailure) else parse_predicted_rewards(seq)
        if pred is not None:
            r_c = consistency_reward(pred, (float(r_a), float(r_f_eval)))
            selfeval_valid = True

    total = 0.0
    if flags.acc:
        total += r_a
    if flags.fmt_r:
        total += r_f_reason
    if flags.fmt_e:
        total += r_f_eval
    if flags.con:
        total += r_c if r_c is not None else 0.0
    return RewardBreakdown(
        r_a=r_a,
        r_f_reason=r_f_reason,
        r_f_eval=r_f_eval,
        r_c=r_c,
        total=total,
        selfeval_valid=selfeval_valid,
        flags=flags,
    )
