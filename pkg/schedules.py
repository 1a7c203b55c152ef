"""Training configurations of the method/ablation matrix."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Tuple

from rewards import RewardFlags


class PhasePlan(str, Enum):
    CONCURRENT = "concurrent"
    SEQUENTIAL = "sequential"


class PhaseKind(str, Enum):
    SFT = "sft"
    RL = "rl"
    JOINT = "joint"


@dataclass(frozen=True)
class Phase:
    kind: PhaseKind
    epoch: int


@dataclass(frozen=True)
class Schedule:
    """One row of the matrix: which losses run and which rewards count."""

    method: str
    description: str
    post_output: bool
    sft_r: bool
    sft_e: bool
    rl: bool
    flags: RewardFlags = field(default_factory=lambda: RewardFlags(False, False, False, False))
    phase_plan: PhasePlan = PhasePlan.CONCURRENT

    def __post_init__(self) -> None:
        if not (self.sft_r or self.sft_e or self.rl):
            raise ValueError(f"{self.method}: every training term is disabled")
        if self.rl and not self.flags.any():
            raise ValueError(f"{self.method}: RL needs at least one reward flag")
        if not self.rl and self.flags.any():
            raise ValueError(f"{self.method}: reward flags set without RL")
        if self.sft_e and not self.post_output:
            raise ValueError(f"{self.method}: evaluation SFT needs post-completion output")

    def phases(self, epochs: int) -> List[Phase]:
        """Epoch plan: SFT epochs then RL epochs, or joint epochs."""
        if epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {epochs}")
        if self.phase_plan is PhasePlan.SEQUENTIAL:
            return [Phase(PhaseKind.SFT, e) for e in range(epochs)] + [
                Phase(PhaseKind.RL, e) for e in range(epochs)
            ]
        return [Phase(PhaseKind.JOINT, e) for e in range(epochs)]

    @property
    def slug(self) -> str:
        return re.sub(r"[^a-z0-9]+", "-", self.method.lower()).strip("-")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "post_output": self.post_output,
            "sft_r": self.sft_r,
            "sft_e": self.sft_e,
            "rl": self.rl,
            "flags": self.flags.to_dict(),
            "phase_plan": self.phase_plan.value,
        }


_OFF = RewardFlags(False, False, False, False)

TABLE: Tuple[Schedule, ...] = (
    Schedule("SFT", "Supervised fine-tuning only", False, True, False, False, _OFF),
    Schedule(
        "SFT+RL",
        "Sequential SFT then RL",
        False,
        True,
        False,
        True,
        RewardFlags(acc=True, fmt_r=True, fmt_e=False, con=False),
        PhasePlan.SEQUENTIAL,
    ),
    Schedule(
        "Joint SFT+RL",
        "Concurrent SFT and RL",
        False,
        True,
        False,
        True,
        RewardFlags(acc=True, fmt_r=True, fmt_e=False, con=False),
    ),
    Schedule(
        "w/ eval output",
        "Joint SFT+RL plus post-completion output",
        True,
        True,
        False,
        True,
        RewardFlags(acc=True, fmt_r=True, fmt_e=True, con=False),
    ),
    Schedule("Teacher distillation only", "SFT with reasoning+evaluation data", True, True, True, False, _OFF),
    Schedule(
        "PCL w/o eval SFT",
        "No supervised training on evaluation",
        True,
        True,
        False,
        True,
        RewardFlags(acc=True, fmt_r=True, fmt_e=True, con=True),
    ),
    Schedule(
        "PCL w/o consistency",
        "No consistency reward function",
        True,
        True,
        True,
        True,
        RewardFlags(acc=True, fmt_r=True, fmt_e=True, con=False),
    ),
    Schedule(
        "PCL (Complete)",
        "Full post-completion learning",
        True,
        True,
        True,
        True,
        RewardFlags(acc=True, fmt_r=True, fmt_e=True, con=True),
    ),
)

ALIASES: Dict[str, str] = {
    "SFT + RL": "SFT+RL",
    "RFT (Joint SFT + RL)": "Joint SFT+RL",
    "RFT (Joint SFT+RL)": "Joint SFT+RL",
    "Joint SFT+RL w/ eval output": "w/ eval output",
    "RFT (Joint SFT+RL) w/ eval output": "w/ eval output",
}

_BY_NAME: Dict[str, Schedule] = {row.method: row for row in TABLE}


def method_names() -> Tuple[str, ...]:
    return tuple(row.method for row in TABLE)


def resolve(name: str) -> Schedule:
    """Schedule for a row name (or one of its published spellings)."""
    canonical = ALIASES.get(name, name)
    try:
        return _BY_NAME[canonical]
    except KeyError:
        valid = ", ".join(repr(n) for n in method_names())
        raise ValueError(f"Unknown method {name!r}; valid names: {valid}") from None


def table_order(name: str) -> int:
    return method_names().index(resolve(name).method)
