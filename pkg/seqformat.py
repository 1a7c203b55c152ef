"""PCL token vocabulary, sequence rendering/parsing and section masks.

A full sequence is laid out as::

    BOS question <think> think </think> <answer> answer </answer>
    <post-completion> <evaluation> evaluation </evaluation>
    <reward> a.a f.f </reward> EOS

Everything up to ``<post-completion>`` is the reasoning region; the rest is
the reflection region, which is only ever produced during training.
"""

from __future__ import annotations

import json
import logging
import re
import string
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

logger = logging.getLogger("pcl.seqformat")

PAD = "<pad>"
BOS = "<bos>"
EOS = "<eos>"
THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
ANSWER_OPEN = "<answer>"
ANSWER_CLOSE = "</answer>"
POST_COMPLETION = "<post-completion>"
EVAL_OPEN = "<evaluation>"
EVAL_CLOSE = "</evaluation>"
REWARD_OPEN = "<reward>"
REWARD_CLOSE = "</reward>"

MARKERS: Tuple[str, ...] = (
    PAD,
    BOS,
    EOS,
    THINK_OPEN,
    THINK_CLOSE,
    ANSWER_OPEN,
    ANSWER_CLOSE,
    POST_COMPLETION,
    EVAL_OPEN,
    EVAL_CLOSE,
    REWARD_OPEN,
    REWARD_CLOSE,
)
SYMBOLS: Tuple[str, ...] = tuple(string.digits) + ("+", "-", "=", "?", " ", ".", "\n") + tuple(
    string.ascii_lowercase
)

VOCAB_SCHEMA_VERSION = 1

# Canonical marker order; the reflection half is optional as a block.
_REASONING_ORDER = (THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE, POST_COMPLETION)
_REFLECTION_ORDER = (EVAL_OPEN, EVAL_CLOSE, REWARD_OPEN, REWARD_CLOSE, EOS)
_ADJACENT = (
    (THINK_CLOSE, ANSWER_OPEN),
    (ANSWER_CLOSE, POST_COMPLETION),
    (POST_COMPLETION, EVAL_OPEN),
    (EVAL_CLOSE, REWARD_OPEN),
    (REWARD_CLOSE, EOS),
)

SECTION_TAGS: FrozenSet[str] = frozenset({"question", "think", "answer", "evaluation", "reward"})
REASONING_SECTIONS: FrozenSet[str] = frozenset({"think", "answer"})
REFLECTION_SECTIONS: FrozenSet[str] = frozenset({"evaluation", "reward"})

_SCORE_PATTERN = re.compile(r"([01]\.[0-9]) ([01]\.[0-9])")


class MissingRewardSection(ValueError):
    """A full rendering was requested for a sequence without reward scores."""


class UnparseableSequence(ValueError):
    """Tokens do not follow the canonical PCL layout."""


class UnknownToken(ValueError):
    """Text contains a character outside the vocabulary."""


class RenderMode(str, Enum):
    REASONING_ONLY = "reasoning_only"
    FULL = "full"


class Vocab:
    """Character-level vocabulary with single-token markers."""

    def __init__(self, markers: Sequence[str] = MARKERS, symbols: Sequence[str] = SYMBOLS) -> None:
        overlap = set(markers) & set(symbols)
        if overlap:
            raise ValueError(f"Markers and symbols overlap: {sorted(overlap)}")
        self.tokens: Tuple[str, ...] = tuple(markers) + tuple(symbols)
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("Duplicate vocabulary entries")
        self._ids: Dict[str, int] = {tok: i for i, tok in enumerate(self.tokens)}
        self.marker_ids: FrozenSet[int] = frozenset(self._ids[m] for m in markers)
        # longest spelling first so "</think>" never matches as "<" + ...
        self._marker_spellings = sorted(markers, key=len, reverse=True)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise UnknownToken(f"Unknown token: {token!r}") from None

    def token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise UnknownToken(f"Token id out of range: {token_id}")
        return self.tokens[token_id]

    def is_marker(self, token_id: int) -> bool:
        return token_id in self.marker_ids

    def encode(self, text: str) -> List[int]:
        """Tokenize text; marker spellings become single tokens."""
        ids: List[int] = []
        i = 0
        while i < len(text):
            if text[i] == "<":
                for spelling in self._marker_spellings:
                    if text.startswith(spelling, i):
                        ids.append(self._ids[spelling])
                        i += len(spelling)
                        break
                else:
                    raise UnknownToken(f"Unknown token at offset {i}: {text[i:i + 16]!r}")
                continue
            ids.append(self.id(text[i]))
            i += 1
        return ids

    def encode_plain(self, text: str) -> Tuple[int, ...]:
        """Tokenize section content; marker spellings are rejected."""
        return tuple(self.id(ch) for ch in text)

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.token(i) for i in ids)

    def manifest(self) -> Dict[str, object]:
        return {
            "schema_version": VOCAB_SCHEMA_VERSION,
            "size": len(self.tokens),
            "markers": list(MARKERS),
            "tokens": {tok: i for i, tok in enumerate(self.tokens)},
        }


VOCAB = Vocab()

PAD_ID = VOCAB.id(PAD)
BOS_ID = VOCAB.id(BOS)
EOS_ID = VOCAB.id(EOS)
THINK_OPEN_ID = VOCAB.id(THINK_OPEN)
POST_COMPLETION_ID = VOCAB.id(POST_COMPLETION)


def export_vocab(path: Union[str, Path], vocab: Vocab = VOCAB) -> Path:
    """Write the token -> id manifest as JSON."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(vocab.manifest(), indent=2, sort_keys=False) + "\n", encoding="utf-8")
    return out


def format_scores(scores: Tuple[float, float]) -> str:
    """Fixed-width surface form of (accuracy, format), e.g. ``1.0 0.0``."""
    parts = []
    for value in scores:
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"Score out of range: {value}")
        if abs(round(value * 10) - value * 10) > 1e-9:
            raise ValueError(f"Score needs one fractional digit: {value}")
        parts.append(f"{value:.1f}")
    return " ".join(parts)


def parse_scores(text: str) -> Optional[Tuple[float, float]]:
    """Inverse of :func:`format_scores`; None when the form deviates."""
    match = _SCORE_PATTERN.fullmatch(text)
    if match is None:
        return None
    values = (float(match.group(1)), float(match.group(2)))
    if any(v > 1.0 for v in values):
        return None
    return values


def _as_tuple(tokens: Optional[Iterable[int]]) -> Optional[Tuple[int, ...]]:
    return None if tokens is None else tuple(int(t) for t in tokens)


@dataclass(frozen=True)
class PCLSequence:
    """One sample split into its sections (markers stripped).

    ``evaluation`` and ``reward_tokens`` are None when the reflection region
    is absent (reasoning-only sequences).
    """

    question: Tuple[int, ...]
    think: Tuple[int, ...]
    answer: Tuple[int, ...]
    evaluation: Optional[Tuple[int, ...]] = None
    reward_tokens: Optional[Tuple[int, ...]] = None
    reward_pred: Optional[Tuple[float, float]] = None

    def __post_init__(self) -> None:
        for name in ("question", "think", "answer", "evaluation", "reward_tokens"):
            value = _as_tuple(getattr(self, name))
            object.__setattr__(self, name, value)
            if value is None:
                if name in ("question", "think", "answer"):
                    raise ValueError(f"Section {name} must not be None")
                continue
            for token_id in value:
                if not 0 <= token_id < VOCAB.size:
                    raise ValueError(f"Token id out of range in {name}: {token_id}")
                if VOCAB.is_marker(token_id):
                    raise ValueError(f"Marker token inside section {name}: {VOCAB.token(token_id)}")

        if self.reward_pred is not None:
            pred = (float(self.reward_pred[0]), float(self.reward_pred[1]))
            surface = VOCAB.encode_plain(format_scores(pred))
            if self.reward_tokens is None:
                object.__setattr__(self, "reward_tokens", surface)
            elif self.reward_tokens != surface:
                raise ValueError("reward_pred does not match its surface rendering")
            object.__setattr__(self, "reward_pred", pred)
        elif self.reward_tokens is not None:
            object.__setattr__(self, "reward_pred", parse_scores(VOCAB.decode(self.reward_tokens)))

    @classmethod
    def from_text(
        cls,
        question: str,
        think: str,
        answer: str,
        evaluation: Optional[str] = None,
        reward_pred: Optional[Tuple[float, float]] = None,
    ) -> "PCLSequence":
        return cls(
            question=VOCAB.encode_plain(question),
            think=VOCAB.encode_plain(think),
            answer=VOCAB.encode_plain(answer),
            evaluation=None if evaluation is None else VOCAB.encode_plain(evaluation),
            reward_pred=reward_pred,
        )

    @property
    def has_reflection(self) -> bool:
        return self.evaluation is not None and self.reward_tokens is not None

    def text(self, section: str) -> str:
        tokens = {
            "question": self.question,
            "think": self.think,
            "answer": self.answer,
            "evaluation": self.evaluation,
            "reward": self.reward_tokens,
        }[section]
        return "" if tokens is None else VOCAB.decode(tokens)


@dataclass(frozen=True)
class ParseFailure:
    """Why a token list is not a canonical PCL sequence."""

    missing: Tuple[str, ...] = ()
    misordered: Tuple[str, ...] = ()
    duplicated: Tuple[str, ...] = ()
    unexpected: Tuple[str, ...] = ()

    @property
    def detail(self) -> str:
        parts = []
        for label in ("missing", "misordered", "duplicated", "unexpected"):
            values = getattr(self, label)
            if values:
                parts.append(f"{label}: {', '.join(values)}")
        return "; ".join(parts) or "unparseable"


@dataclass(frozen=True)
class SectionMask:
    """Boolean loss mask aligned 1:1 with a rendered token sequence."""

    values: Tuple[bool, ...]
    sections: FrozenSet[str] = field(default_factory=frozenset)

    def __len__(self) -> int:
        return len(self.values)

    def count(self) -> int:
        return sum(self.values)

    def intersects(self, other: "SectionMask") -> bool:
        return any(a and b for a, b in zip(self.values, other.values))


ParseResult = Union[PCLSequence, ParseFailure]


def render(seq: PCLSequence, mode: Union[RenderMode, str] = RenderMode.FULL) -> List[int]:
    """Lay out a sequence as token ids; deterministic."""
    mode = RenderMode(mode)
    ids = VOCAB.id
    tokens = [ids(BOS), *seq.question, ids(THINK_OPEN), *seq.think, ids(THINK_CLOSE)]
    tokens += [ids(ANSWER_OPEN), *seq.answer, ids(ANSWER_CLOSE), ids(POST_COMPLETION)]
    if mode is RenderMode.REASONING_ONLY:
        return tokens
    if seq.reward_pred is None or seq.reward_tokens is None:
        raise MissingRewardSection("Full rendering needs parsed reward scores")
    tokens += [ids(EVAL_OPEN), *(seq.evaluation or ()), ids(EVAL_CLOSE)]
    tokens += [ids(REWARD_OPEN), *seq.reward_tokens, ids(REWARD_CLOSE), ids(EOS)]
    return tokens


@dataclass(frozen=True)
class _Layout:
    positions: Dict[str, int]
    end: int
    full: bool


def _locate(tokens: Sequence[int]) -> Union[_Layout, ParseFailure]:
    toks = list(tokens)
    for i, token_id in enumerate(toks):
        if not isinstance(token_id, int) or not 0 <= token_id < VOCAB.size:
            return ParseFailure(unexpected=(f"unknown token at {i}",))

    end = len(toks)
    while end > 0 and toks[end - 1] == PAD_ID:
        end -= 1
    if end == 0 or toks[0] != BOS_ID:
        return ParseFailure(missing=(BOS,))

    found: Dict[str, List[int]] = {}
    unexpected: List[str] = []
    for i in range(1, end):
        token_id = toks[i]
        if not VOCAB.is_marker(token_id):
            continue
        name = VOCAB.token(token_id)
        if name in (BOS, PAD):
            unexpected.append(f"{name} at {i}")
            continue
        found.setdefault(name, []).append(i)

    duplicated = tuple(name for name in MARKERS if len(found.get(name, ())) > 1)
    full = any(name in found for name in _REFLECTION_ORDER)
    order = _REASONING_ORDER + (_REFLECTION_ORDER if full else ())
    missing = tuple(name for name in order if name not in found)
    if duplicated or missing or unexpected:
        return ParseFailure(missing=missing, duplicated=duplicated, unexpected=tuple(unexpected))

    positions = {name: found[name][0] for name in order}
    misordered = tuple(
        name for prev, name in zip(order, order[1:]) if positions[name] <= positions[prev]
    )
    if misordered:
        return ParseFailure(misordered=misordered)

    stray = [
        f"tokens between {a} and {b}"
        for a, b in _ADJACENT
        if a in positions and b in positions and positions[b] != positions[a] + 1
    ]
    last = positions[order[-1]]
    if last != end - 1:
        stray.append(f"tokens after {order[-1]}")
    if stray:
        return ParseFailure(unexpected=tuple(stray))
    return _Layout(positions=positions, end=end, full=full)


def parse(tokens: Sequence[int]) -> ParseResult:
    """Split a token list into sections; never raises on malformed input."""
    try:
        layout = _locate(tokens)
    except Exception:
        logger.exception("Unexpected error while parsing token list")
        return ParseFailure(unexpected=("internal error",))
    if isinstance(layout, ParseFailure):
        return layout

    toks = list(tokens)
    pos = layout.positions
    evaluation = reward_tokens = None
    if layout.full:
        evaluation = toks[pos[EVAL_OPEN] + 1 : pos[EVAL_CLOSE]]
        reward_tokens = toks[pos[REWARD_OPEN] + 1 : pos[REWARD_CLOSE]]
    return PCLSequence(
        question=toks[1 : pos[THINK_OPEN]],
        think=toks[pos[THINK_OPEN] + 1 : pos[THINK_CLOSE]],
        answer=toks[pos[ANSWER_OPEN] + 1 : pos[ANSWER_CLOSE]],
        evaluation=evaluation,
        reward_tokens=reward_tokens,
    )


def _spans(layout: _Layout) -> Dict[str, Tuple[int, int]]:
    pos = layout.positions
    spans = {
        "question": (1, pos[THINK_OPEN] - 1),
        "think": (pos[THINK_OPEN], pos[THINK_CLOSE]),
        "answer": (pos[ANSWER_OPEN], pos[POST_COMPLETION]),
    }
    if layout.full:
        spans["evaluation"] = (pos[EVAL_OPEN], pos[EVAL_CLOSE])
        spans["reward"] = (pos[REWARD_OPEN], pos[EOS])
    return spans


def section_mask(tokens: Sequence[int], sections: Iterable[str]) -> SectionMask:
    """Mask over the named sections, inclusive of their markers.

    ``answer`` owns the trailing ``<post-completion>`` and ``reward`` owns the
    final EOS; BOS and the question are never part of a training track.
    """
    wanted = frozenset(sections)
    unknown = wanted - SECTION_TAGS
    if unknown:
        raise ValueError(f"Unknown section tags: {sorted(unknown)}")
    layout = _locate(tokens)
    if isinstance(layout, ParseFailure):
        raise UnparseableSequence(layout.detail)

    values = [False] * len(tokens)
    for name, (start, stop) in _spans(layout).items():
        if name in wanted:
            for i in range(start, stop + 1):
                values[i] = True
    return SectionMask(values=tuple(values), sections=wanted)


def reasoning_prefix(tokens: Sequence[int]) -> List[int]:
    """Tokens up to and including the first ``<post-completion>``."""
    toks = list(tokens)
    try:
        return toks[: toks.index(POST_COMPLETION_ID) + 1]
    except ValueError:
        return toks


def contains_all_sections(tokens: Sequence[int]) -> bool:
    """True iff think, answer, evaluation and reward are present and non-empty."""
    seq = parse(tokens)
    if isinstance(seq, ParseFailure) or not seq.has_reflection:
        return False
    return all(len(part) > 0 for part in (seq.think, seq.answer, seq.evaluation, seq.reward_tokens))


def prompt_tokens(question: Union[str, Sequence[int]]) -> List[int]:
    """Sampling prompt for a question: ``BOS question``."""
    body = VOCAB.encode_plain(question) if isinstance(question, str) else tuple(question)
    return [BOS_ID, *body]
