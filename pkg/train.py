"""Dual-track SFT, group-relative RL and the combined training loop."""

from __future__ import annotations

import json
import logging
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from corpus_io import JsonlReader
from datagen import CorpusError, CorpusRecord, load_corpus
from model import (
    ContextOverflow,
    EmptyMask,
    TinyDecoder,
    batch_masked_nll,
    frozen_copy,
    init_model,
    sample_batch,
    save_checkpoint,
)
from rewards import RewardBreakdown, RewardFlags, total_reward
from schedules import PhaseKind, Schedule
from seeding import derive_seed
from seqformat import EOS_ID, POST_COMPLETION_ID, REASONING_SECTIONS, REFLECTION_SECTIONS, prompt_tokens, section_mask
from tasks import TaskInstance
from train_config import TrainConfig

logger = logging.getLogger("pcl.train")

ADVANTAGE_EPS = 1e-4
REWARD_COMPONENTS = ("r_a", "r_f_reason", "r_f_eval", "r_c")


class NumericFailure(RuntimeError):
    """A loss or gradient became non-finite; ``dump_path`` holds the batch."""

    def __init__(self, message: str, dump_path: Optional[Path] = None) -> None:
        super().__init__(message)
        self.dump_path = dump_path


class UnkeptRecordError(ValueError):
    """A record rejected by the validation filter reached evaluation SFT."""


@dataclass
class SFTLoss:
    loss: torch.Tensor
    n_items: int
    skipped: int = 0


def _masked_items(
    sequences: Iterable[Sequence[int]], sections: Iterable[str]
) -> List[Tuple[Sequence[int], Sequence[bool]]]:
    wanted = frozenset(sections)
    return [(tokens, section_mask(tokens, wanted).values) for tokens in sequences]


def sft_reasoning_loss(model: TinyDecoder, records: Sequence[CorpusRecord]) -> SFTLoss:
    """Stage-1 loss over think, answer and the closing ``<post-completion>``."""
    usable = [r.reasoning_tokens for r in records if r.reasoning_tokens is not None]
    skipped = len(records) - len(usable)
    if skipped:
        logger.warning("Skipped %d record(s) without a reasoning target", skipped)
    if not usable:
        raise EmptyMask("No record in the batch carries a reasoning target")
    return SFTLoss(batch_masked_nll(model, _masked_items(usable, REASONING_SECTIONS)), len(usable), skipped)


def sft_evaluation_loss(model: TinyDecoder, records: Sequence[CorpusRecord]) -> SFTLoss:
    """Stage-2 loss over evaluation, reward and EOS with the reasoning as context."""
    for record in records:
        if not record.kept or record.full_tokens is None:
            raise UnkeptRecordError(f"Record {record.id} was not kept by the validation filter")
    if not records:
        raise EmptyMask("Empty evaluation batch")
    items = _masked_items((r.full_tokens for r in records), REFLECTION_SECTIONS)
    return SFTLoss(batch_masked_nll(model, items), len(items))


def check_disjoint_tracks(records: Sequence[CorpusRecord]) -> None:
    """Each track's mask, on the sequence that track trains, stays out of the other track's sections."""
    for record in records:
        if record.reasoning_tokens is not None:
            if section_mask(record.reasoning_tokens, REFLECTION_SECTIONS).count():
                raise RuntimeError(f"Reasoning target of record {record.id} reaches into the reflection")
        if record.full_tokens is None:
            continue
        reasoning = section_mask(record.full_tokens, REASONING_SECTIONS)
        reflection = section_mask(record.full_tokens, REFLECTION_SECTIONS)
        if reasoning.intersects(reflection):
            raise RuntimeError(f"SFT masks overlap on record {record.id}")


@dataclass
class Rollout:
    """One sampled continuation of a question and its score."""

    question: str
    ground_truth: str
    prompt: Tuple[int, ...]
    tokens: Tuple[int, ...]
    logprobs: Tuple[float, ...]
    reward: Optional[RewardBreakdown]
    advantage: float = 0.0
    valid: bool = True
    error: Optional[str] = None

    @property
    def full_tokens(self) -> Tuple[int, ...]:
        return self.prompt + self.tokens


def group_advantages(rewards: Sequence[float], eps: float = ADVANTAGE_EPS) -> List[float]:
    """(r - mean) / (population std + eps) within one group."""
    values = torch.tensor(list(rewards), dtype=torch.float64)
    centered = values - values.mean()
    std = values.std(unbiased=False) if len(rewards) > 1 else torch.zeros((), dtype=torch.float64)
    return (centered / (std + eps)).tolist()


def stop_tokens_for(post_output: bool) -> frozenset:
    return frozenset({EOS_ID}) if post_output else frozenset({POST_COMPLETION_ID, EOS_ID})


def collect_rollouts(
    model: TinyDecoder,
    questions: Sequence[TaskInstance],
    cfg: TrainConfig,
    flags: RewardFlags,
    post_output: bool,
    rng: Optional[torch.Generator] = None,
) -> List[List[Rollout]]:
    """Sample ``group_size`` continuations per question and attach advantages."""
    groups: List[List[Rollout]] = []
    stops = stop_tokens_for(post_output)
    for inst in questions:
        prompt = tuple(prompt_tokens(inst.question))
        max_new = min(cfg.max_new, model.config.context_length - len(prompt))
        try:
            samples = sample_batch(model, prompt, cfg.group_size, stops, max_new, cfg.temperature, rng)
        except (ContextOverflow, ValueError, RuntimeError) as exc:
            logger.warning("Sampling failed for %s: %s", inst.question, exc)
            groups.append(
                [
                    Rollout(inst.question, inst.ground_truth, prompt, (), (), None, valid=False, error=str(exc))
                    for _ in range(cfg.group_size)
                ]
            )
            continue

        group = []
        for result in samples:
            if not result.tokens:
                group.append(
                    Rollout(inst.question, inst.ground_truth, prompt, (), (), None, valid=False, error="empty")
                )
                continue
            reward = total_reward(prompt + result.tokens, inst.ground_truth, flags)
            group.append(Rollout(inst.question, inst.ground_truth, prompt, result.tokens, result.logprobs, reward))

        valid = [r for r in group if r.valid]
        if len(valid) < len(group):
            logger.warning("Excluded %d invalid rollout(s) for %s", len(group) - len(valid), inst.question)
        if valid:
            for rollout, advantage in zip(valid, group_advantages([r.reward.total for r in valid])):
                rollout.advantage = advantage
        groups.append(group)
    return groups


@dataclass
class RLTerms:
    loss: torch.Tensor
    policy: torch.Tensor
    kl: torch.Tensor
    n_rollouts: int


def rl_loss(model: TinyDecoder, ref: TinyDecoder, groups: Sequence[Sequence[Rollout]], beta: float) -> RLTerms:
    """Policy-gradient loss plus exact KL to ``ref`` on frozen rollouts.

    Per rollout: ``-mean_t(A * log pi(y_t))`` + ``beta * mean_t KL(pi || ref)``
    over generated positions, then averaged over rollouts.
    """
    rollouts = [r for group in groups for r in group if r.valid and r.tokens]
    dtype = model.config.dtype
    if not rollouts:
        zero = torch.zeros((), dtype=dtype)
        return RLTerms(zero, zero, zero, 0)

    width = max(len(r.full_tokens) for r in rollouts)
    idx = torch.zeros((len(rollouts), width), dtype=torch.long)
    gen_mask = torch.zeros((len(rollouts), width - 1), dtype=torch.bool)
    for row, rollout in enumerate(rollouts):
        full = rollout.full_tokens
        idx[row, : len(full)] = torch.tensor(full, dtype=torch.long)
        # logits at t-1 predict token t
        gen_mask[row, len(rollout.prompt) - 1 : len(full) - 1] = True
    advantages = torch.tensor([r.advantage for r in rollouts], dtype=dtype)

    logp = torch.log_softmax(model(idx)[:, :-1], dim=-1)
    with torch.no_grad():
        ref_logp = torch.log_softmax(ref(idx)[:, :-1], dim=-1)
    token_logp = logp.gather(-1, idx[:, 1:].unsqueeze(-1)).squeeze(-1)
    kl = (logp.exp() * (logp - ref_logp)).sum(dim=-1)

    weights = gen_mask.to(dtype)
    counts = weights.sum(dim=1)
    policy = (-(advantages[:, None] * token_logp) * weights).sum(dim=1) / counts
    kl_mean = (kl * weights).sum(dim=1) / counts
    return RLTerms(
        loss=(policy + beta * kl_mean).mean(),
        policy=policy.mean(),
        kl=kl_mean.mean(),
        n_rollouts=len(rollouts),
    )


@dataclass
class GRPOResult:
    terms: RLTerms
    groups: List[List[Rollout]]


def grpo_step(
    model: TinyDecoder,
    ref: TinyDecoder,
    questions: Sequence[TaskInstance],
    cfg: TrainConfig,
    flags: RewardFlags,
    post_output: bool,
    rng: Optional[torch.Generator] = None,
) -> GRPOResult:
    """Sample, score and build the differentiable RL loss for one batch."""
    if not flags.any():
        raise ValueError("RL needs at least one reward flag")
    groups = collect_rollouts(model, questions, cfg, flags, post_output, rng)
    return GRPOResult(rl_loss(model, ref, groups, cfg.beta), groups)


@dataclass
class StepTerms:
    """Loss terms of one combined step; ``total`` is their unweighted sum."""

    total: torch.Tensor
    values: Dict[str, float] = field(default_factory=dict)
    groups: List[List[Rollout]] = field(default_factory=list)
    sampled: bool = False


def combined_loss(
    model: TinyDecoder,
    ref: Optional[TinyDecoder],
    records: Sequence[CorpusRecord],
    cfg: TrainConfig,
    schedule: Schedule,
    phase: PhaseKind = PhaseKind.JOINT,
    rng: Optional[torch.Generator] = None,
) -> StepTerms:
    """Sum of the enabled terms on one underlying question batch."""
    use_sft = phase in (PhaseKind.SFT, PhaseKind.JOINT)
    use_rl = phase in (PhaseKind.RL, PhaseKind.JOINT)
    want_r = schedule.sft_r and use_sft
    want_e = schedule.sft_e and use_sft
    want_rl = schedule.rl and use_rl
    if not (want_r or want_e or want_rl):
        raise ValueError(f"{schedule.method}: no loss term enabled in phase {phase.value}")

    parts: List[torch.Tensor] = []
    values: Dict[str, float] = {}
    if want_r:
        term = sft_reasoning_loss(model, records).loss
        parts.append(term)
        values["sft_r"] = float(term.item())
    if want_e:
        kept = [r for r in records if r.kept and r.full_tokens is not None]
        if want_r:
            check_disjoint_tracks(kept)
        if kept:
            term = sft_evaluation_loss(model, kept).loss
            parts.append(term)
            values["sft_e"] = float(term.item())
        else:
            logger.debug("No kept record in batch; evaluation SFT term skipped")

    groups: List[List[Rollout]] = []
    if want_rl:
        if ref is None:
            raise ValueError("RL term needs a reference snapshot")
        questions = [r.task for r in records[: cfg.rl_questions]]
        result = grpo_step(model, ref, questions, cfg, schedule.flags, schedule.post_output, rng)
        groups = result.groups
        if result.terms.n_rollouts:
            parts.append(result.terms.loss)
            values["rl"] = float(result.terms.loss.item())
            values["pg"] = float(result.terms.policy.item())
            values["kl"] = float(result.terms.kl.item())

    if not parts:
        raise EmptyMask("Batch produced no loss term")
    total = parts[0]
    for part in parts[1:]:
        total = total + part
    values["total"] = float(total.item())
    return StepTerms(total=total, values=values, groups=groups, sampled=want_rl)


def make_optimizer(model: TinyDecoder, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps
    )


@dataclass
class StepResult:
    terms: StepTerms
    grad_norm: float


def _write_dump(dump_dir: Path, step: int, records: Sequence[CorpusRecord], values: Dict[str, float]) -> Path:
    dump_dir.mkdir(parents=True, exist_ok=True)
    path = dump_dir / f"numeric_failure_step{step}.json"
    payload = {
        "step": step,
        "terms": {k: repr(v) for k, v in values.items()},
        "records": [r.to_dict() for r in records],
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def combined_step(
    model: TinyDecoder,
    optimizer: torch.optim.Optimizer,
    ref: Optional[TinyDecoder],
    records: Sequence[CorpusRecord],
    cfg: TrainConfig,
    schedule: Schedule,
    phase: PhaseKind = PhaseKind.JOINT,
    rng: Optional[torch.Generator] = None,
    step: int = 0,
    dump_dir: Optional[Path] = None,
) -> StepResult:
    """Backward on the combined loss, clip, one Adam update."""
    optimizer.zero_grad(set_to_none=True)
    terms = combined_loss(model, ref, records, cfg, schedule, phase, rng)

    def _fail(what: str) -> NumericFailure:
        path = _write_dump(dump_dir, step, records, terms.values) if dump_dir is not None else None
        logger.error("Non-finite %s at step %d (dump: %s)", what, step, path)
        return NumericFailure(f"Non-finite {what} at step {step}", path)

    if not math.isfinite(terms.values["total"]):
        raise _fail("loss")
    terms.total.backward()
    max_norm = cfg.grad_clip if cfg.grad_clip > 0 else float("inf")
    grad_norm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), max_norm))
    if not math.isfinite(grad_norm):
        raise _fail("gradient")
    optimizer.step()
    return StepResult(terms, grad_norm)


def _mean(values: Sequence[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


def step_metrics(result: StepResult) -> Dict[str, Any]:
    rollouts = [r for group in result.terms.groups for r in group]
    valid = [r for r in rollouts if r.valid and r.reward is not None]
    metrics: Dict[str, Any] = {
        "loss": dict(sorted(result.terms.values.items())),
        "grad_norm": result.grad_norm,
        "grad_norm_sq": result.grad_norm**2,
        "sampled": result.terms.sampled,
        "n_rollouts": len(rollouts),
        "n_invalid": len(rollouts) - len(valid),
    }
    if result.terms.sampled:
        rewards = {
            name: _mean([getattr(r.reward, name) for r in valid if getattr(r.reward, name) is not None])
            for name in REWARD_COMPONENTS
        }
        rewards["total"] = _mean([r.reward.total for r in valid])
        rewards["selfeval_valid"] = _mean([float(r.reward.selfeval_valid) for r in valid])
        metrics["rewards"] = rewards
        metrics["kl"] = result.terms.values.get("kl")
        metrics["gen_tokens"] = _mean([float(len(r.tokens)) for r in valid])
    return metrics


@dataclass(frozen=True)
class TrainResult:
    success: bool
    out_dir: Path
    final_checkpoint: Optional[Path]
    metrics_path: Path
    steps: int
    error: Optional[str] = None


def _check_lengths(records: Sequence[CorpusRecord], context_length: int) -> None:
    longest = max(
        max(len(r.reasoning_tokens or ()), len(r.full_tokens or ())) for r in records
    )
    if longest > context_length:
        raise ContextOverflow(f"Corpus holds a {longest}-token sequence; context is {context_length}")


def longest_continuation(records: Sequence[CorpusRecord]) -> int:
    """Most tokens any gold target holds past its question prompt."""
    longest = 0
    for record in records:
        target = record.full_tokens or record.reasoning_tokens or ()
        longest = max(longest, len(target) - len(prompt_tokens(record.task.question)))
    return longest


def fit_generation_budget(records: Sequence[CorpusRecord], cfg: TrainConfig) -> TrainConfig:
    """Reject a context that cannot hold the corpus; widen ``max_new`` to its longest target."""
    _check_lengths(records, cfg.context_length)
    needed = longest_continuation(records)
    if needed <= cfg.max_new:
        return cfg
    logger.warning("max_new %d is shorter than the longest gold continuation; using %d", cfg.max_new, needed)
    return cfg.with_overrides(max_new=needed)


def train_run(
    schedule: Schedule,
    cfg: TrainConfig,
    train_path: Union[str, Path],
    out_dir: Union[str, Path],
) -> TrainResult:
    """Run the schedule's phase plan and write checkpoints plus metrics logs.

    ``metrics.jsonl`` is a pure function of (schedule, config, corpus);
    wall-clock time goes to ``timing.jsonl`` beside it.
    """
    out = Path(out_dir)
    records = [r for r in load_corpus(train_path) if r.reasoning_tokens is not None or r.kept]
    if not records:
        raise CorpusError(f"No usable training records in {train_path}")
    cfg = fit_generation_budget(records, cfg)

    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    timing_path = out / "timing.jsonl"

    torch.manual_seed(derive_seed(cfg.seed, "torch"))
    init_seed = derive_seed(cfg.seed, "init")
    model = init_model(cfg.model_config(), init_seed)
    optimizer = make_optimizer(model, cfg)
    ref: Optional[TinyDecoder] = None

    logger.info("Training %s on %d records for %d epoch(s)", schedule.method, len(records), cfg.epochs)
    step = 0
    last_ckpt: Optional[Path] = None
    started = time.monotonic()
    with open(metrics_path, "w", encoding="utf-8", newline="\n") as metrics_fh, open(
        timing_path, "w", encoding="utf-8", newline="\n"
    ) as timing_fh:
        for phase_index, phase in enumerate(schedule.phases(cfg.epochs)):
            if schedule.rl and phase.kind in (PhaseKind.RL, PhaseKind.JOINT):
                ref = frozen_copy(model)
            order = list(range(len(records)))
            random.Random(derive_seed(cfg.seed, "shuffle", phase_index)).shuffle(order)
            batches = [order[i : i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
            if cfg.max_steps_per_epoch:
                batches = batches[: cfg.max_steps_per_epoch]

            for batch in batches:
                batch_records = [records[i] for i in batch]
                rng = torch.Generator().manual_seed(derive_seed(cfg.seed, "rollout", step))
                step_start = time.monotonic()
                try:
                    result = combined_step(
                        model, optimizer, ref, batch_records, cfg, schedule, phase.kind, rng, step, out
                    )
                except EmptyMask as exc:
                    logger.warning("Step %d skipped: %s", step, exc)
                    step += 1
                    continue
                row = {"step": step, "phase": phase.kind.value, "epoch": phase.epoch, **step_metrics(result)}
                metrics_fh.write(json.dumps(row, sort_keys=True) + "\n")
                metrics_fh.flush()
                timing_fh.write(json.dumps({"step": step, "seconds": time.monotonic() - step_start}) + "\n")
                if step % 10 == 0:
                    logger.info(
                        "step %d %s epoch %d loss %.4f grad %.3f",
                        step,
                        phase.kind.value,
                        phase.epoch,
                        result.terms.values["total"],
                        result.grad_norm,
                    )
                step += 1

            last_ckpt = save_checkpoint(
                model,
                ckpt_dir / f"phase{phase_index}-{phase.kind.value}-epoch{phase.epoch}.json",
                init_seed,
                step=step,
                method=schedule.method,
            )

    final = save_checkpoint(model, ckpt_dir / "final.json", init_seed, step=step, method=schedule.method)
    logger.info("Finished %s after %d steps in %.1fs (last epoch checkpoint %s)",
                schedule.method, step, time.monotonic() - started, last_ckpt)
    return TrainResult(True, out, final, metrics_path, step)


def read_metrics(path: Union[str, Path]) -> List[Dict[str, Any]]:
    return JsonlReader().read(path)


@dataclass(frozen=True)
class DynamicsSummary:
    """When each reward component's running mean first crossed its threshold."""

    first_crossing: Dict[str, Optional[int]]
    grad_norm_sq_first_quartile: Optional[float]
    grad_norm_sq_last_quartile: Optional[float]
    kl_min: Optional[float]

    @property
    def grad_norm_decreased(self) -> bool:
        first, last = self.grad_norm_sq_first_quartile, self.grad_norm_sq_last_quartile
        return first is not None and last is not None and last < first


DEFAULT_THRESHOLDS = {"r_f_reason": 0.95, "r_f_eval": 0.95, "r_a": 0.9, "r_c": 0.8}


def dynamics_summary(
    rows: Sequence[Dict[str, Any]],
    thresholds: Optional[Dict[str, float]] = None,
    window: int = 20,
) -> DynamicsSummary:
    thresholds = thresholds or DEFAULT_THRESHOLDS
    crossings: Dict[str, Optional[int]] = {}
    for name, threshold in thresholds.items():
        history: List[float] = []
        crossings[name] = None
        for row in rows:
            value = (row.get("rewards") or {}).get(name)
            if value is None:
                continue
            history.append(value)
            if float(np.mean(history[-window:])) >= threshold:
                crossings[name] = int(row["step"])
                break

    norms = [float(row["grad_norm_sq"]) for row in rows if "grad_norm_sq" in row]
    quarter = len(norms) // 4
    first = _mean(norms[:quarter]) if quarter else None
    last = _mean(norms[-quarter:]) if quarter else None
    kls = [float(row["kl"]) for row in rows if row.get("kl") is not None]
    return DynamicsSummary(crossings, first, last, min(kls) if kls else None)
