#!/usr/bin/env python3
"""Command-line entry point: gen-data, train, eval, ablate, score."""

from __future__ import annotations

import argparse
import faulthandler
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, TextIO

from corpus_io import CorpusError
from datagen import build_corpus, split
from evalinfer import EvalReport, eval_self_assessment, evaluate, load_testset, report_table
from model import CheckpointError, ContextOverflow, load_checkpoint
from rewards import RewardFlags, total_reward
from schedules import method_names, resolve
from seeding import config_digest, git_blob_hash
from seqformat import VOCAB, MissingRewardSection, UnknownToken, UnparseableSequence, export_vocab
from sweep import SweepJobConfig, SweepRunner, run_dir_for
from tasks import TaskKind, TeacherConfig
from train import NumericFailure, UnkeptRecordError, train_run
from train_config import TrainConfig, load_config

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

MANIFEST_NAME = "manifest.json"
# malformed corpus contents surface as ValueError subclasses deep in training
_DATA_ERRORS = (
    CorpusError,
    CheckpointError,
    ContextOverflow,
    UnparseableSequence,
    MissingRewardSection,
    UnknownToken,
    UnkeptRecordError,
    OSError,
)
_FAULT_LOG_FILE: Optional[TextIO] = None

logger = logging.getLogger("pcl.cli")


class UsageError(ValueError):
    """Bad command-line usage."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


def _configure_runtime_logging(log_dir: Optional[Path], level: int) -> Optional[Path]:
    stream_handler = logging.StreamHandler(sys.stderr)
    log_format = "%(asctime)s %(levelname)s %(name)s: %(message)s"
    if log_dir is None:
        logging.basicConfig(level=level, format=log_format, handlers=[stream_handler], force=True)
        return None

    log_path = log_dir / "pcl.log"
    try:
        log_dir.mkdir(parents=True, exist_ok=True)
        handlers = [logging.FileHandler(log_path, encoding="utf-8"), stream_handler]
    except Exception:
        logging.basicConfig(level=level, format=log_format, handlers=[stream_handler], force=True)
        logger.exception("Failed to initialize file logging at %s; continuing with stderr only", log_path)
        return None

    logging.basicConfig(level=level, format=log_format, handlers=handlers, force=True)
    return log_path


def _enable_fault_logging(log_dir: Optional[Path]) -> None:
    global _FAULT_LOG_FILE
    if log_dir is None:
        return
    fault_log_path = log_dir / "pcl_fault.log"
    try:
        _FAULT_LOG_FILE = open(fault_log_path, "a", encoding="utf-8")
        faulthandler.enable(_FAULT_LOG_FILE, all_threads=True)
    except Exception:
        if _FAULT_LOG_FILE is not None and not _FAULT_LOG_FILE.closed:
            _FAULT_LOG_FILE.close()
        _FAULT_LOG_FILE = None
        logger.exception("Failed to write faulthandler output to %s", fault_log_path)


def _disable_fault_logging() -> None:
    global _FAULT_LOG_FILE
    if faulthandler.is_enabled():
        faulthandler.disable()
    if _FAULT_LOG_FILE is not None and not _FAULT_LOG_FILE.closed:
        _FAULT_LOG_FILE.close()
    _FAULT_LOG_FILE = None


def _install_exception_hook() -> None:
    def _log_hook(exc_type, exc_value, exc_traceback):
        logger.error("Unhandled exception", exc_info=(exc_type, exc_value, exc_traceback))
        sys.__excepthook__(exc_type, exc_value, exc_traceback)

    sys.excepthook = _log_hook


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """Inputs and outputs of one command invocation in one artifact directory."""

    command: str
    config: Dict[str, Any]
    corpus_hashes: Dict[str, str]
    seeds: List[int]
    schedule: Optional[str] = None
    outputs: Dict[str, str] = field(default_factory=dict)
    output_hashes: Dict[str, str] = field(default_factory=dict)
    status: str = "running"
    started_at: str = ""
    finished_at: str = ""

    def inputs(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "config": self.config,
            "corpus_hashes": self.corpus_hashes,
            "seeds": self.seeds,
            "schedule": self.schedule,
        }

    @property
    def input_digest(self) -> str:
        return config_digest(self.inputs())

    def to_dict(self) -> Dict[str, Any]:
        return {**asdict(self), "input_digest": self.input_digest}

    def write(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, out_dir: Path) -> Optional["RunManifest"]:
        path = out_dir / MANIFEST_NAME
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            data.pop("input_digest", None)
            return cls(**data)
        except FileNotFoundError:
            return None
        except (OSError, ValueError, TypeError) as exc:
            logger.warning("Ignoring unreadable manifest %s: %s", path, exc)
            return None


def _up_to_date(out_dir: Path, manifest: RunManifest, rerun: bool) -> bool:
    previous = RunManifest.read(out_dir)
    if rerun or previous is None or previous.status != "complete":
        return False
    if previous.input_digest != manifest.input_digest:
        return False
    logger.info("%s in %s is up to date; use --rerun to reproduce", manifest.command, out_dir)
    return True


def _hash_files(paths: Sequence[Path]) -> Dict[str, str]:
    hashes = {}
    for path in paths:
        if not path.is_file():
            raise CorpusError(f"Missing data file: {path}")
        hashes[path.name] = git_blob_hash(path)
    return hashes


def _split_list(raw: str, cast=str) -> List[Any]:
    try:
        return [cast(part.strip()) for part in raw.split(",") if part.strip()]
    except ValueError as exc:
        raise UsageError(f"Cannot parse list {raw!r}: {exc}") from None


def cmd_gen_data(args: argparse.Namespace) -> int:
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    rates = _split_list(args.teacher_corruption, float)
    if len(rates) != 2:
        raise UsageError("--teacher-corruption expects ANSWER_RATE,SELFEVAL_RATE")
    kinds = [TaskKind(k) for k in _split_list(args.kinds)]
    difficulties = _split_list(args.difficulty, int)
    fractions = _split_list(args.fractions, float)
    out = Path(args.out)

    manifest = RunManifest(
        command="gen-data",
        config={
            "n": args.n,
            "kinds": [k.value for k in kinds],
            "difficulty": difficulties,
            "teacher_corruption": rates,
            "fractions": fractions,
        },
        corpus_hashes={},
        seeds=[args.seed],
        started_at=_now(),
    )
    if _up_to_date(out, manifest, args.rerun):
        return EXIT_OK
    manifest.write(out)

    teacher = TeacherConfig(answer_corruption_rate=rates[0], selfeval_corruption_rate=rates[1], seed=args.seed)
    stats = build_corpus(out / "corpus.jsonl", args.n, kinds, difficulties, teacher, args.seed, args.workers)
    paths = split(stats.corpus_path, fractions, args.seed, out)
    vocab_path = export_vocab(out / "vocab.json")

    summary = stats.summary
    print(f"records: {summary.total_records}  kept: {summary.total_kept}  dropped: {summary.total_dropped}")
    for reason, count in sorted(summary.drop_reasons.items()):
        print(f"  {reason}: {count}")
    for name, path in paths.items():
        print(f"{name}: {path}")

    manifest.outputs = {
        "corpus": str(stats.corpus_path),
        "stats": str(stats.stats_path),
        "vocab": str(vocab_path),
        **{name: str(path) for name, path in paths.items()},
    }
    manifest.output_hashes = _hash_files([stats.corpus_path, *paths.values()])
    manifest.status, manifest.finished_at = "complete", _now()
    manifest.write(out)
    return EXIT_OK


def _resolve_train_config(args: argparse.Namespace) -> tuple:
    config, method = (TrainConfig(), None)
    if args.config:
        config, method = load_config(args.config)
    method = args.method or method
    if not method:
        raise UsageError(f"--method is required; valid names: {', '.join(repr(n) for n in method_names())}")
    config = config.with_overrides(seed=args.seed, epochs=getattr(args, "epochs", None))
    return config, resolve(method)


def run_train(schedule, config: TrainConfig, data_dir: Path, out: Path, rerun: bool) -> Path:
    """Train one schedule into ``out`` unless an identical run is complete."""
    train_path = data_dir / "train.jsonl"
    manifest = RunManifest(
        command="train",
        config=config.to_dict(),
        corpus_hashes=_hash_files([train_path]),
        seeds=[config.seed],
        schedule=schedule.method,
        started_at=_now(),
    )
    final = out / "checkpoints" / "final.json"
    if _up_to_date(out, manifest, rerun) and final.is_file():
        return final
    manifest.outputs = {"schedule": json.dumps(schedule.to_dict(), sort_keys=True),
                        "reward_flags": ",".join(schedule.flags.enabled())}
    manifest.write(out)
    result = train_run(schedule, config, train_path, out)
    manifest.outputs.update(
        checkpoint=str(result.final_checkpoint), metrics=str(result.metrics_path), steps=str(result.steps)
    )
    manifest.status, manifest.finished_at = "complete", _now()
    manifest.write(out)
    return result.final_checkpoint


def cmd_train(args: argparse.Namespace) -> int:
    config, schedule = _resolve_train_config(args)
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise CorpusError(f"Data directory not found: {data_dir}")
    checkpoint = run_train(schedule, config, data_dir, Path(args.out), args.rerun)
    print(f"checkpoint: {checkpoint}")
    return EXIT_OK


def run_eval(
    ckpt: Path,
    data_dir: Path,
    out: Path,
    method: Optional[str],
    seeds: Sequence[int],
    self_assessment: bool,
    rerun: bool,
) -> EvalReport:
    """Evaluate a checkpoint on ``test.jsonl``; writes report.json and item logs."""
    test_path = data_dir / "test.jsonl"
    manifest = RunManifest(
        command="eval",
        config={"self_assessment": self_assessment, "checkpoint": git_blob_hash(ckpt) if ckpt.is_file() else ""},
        corpus_hashes=_hash_files([test_path]),
        seeds=list(seeds),
        schedule=method,
        started_at=_now(),
    )
    report_path = out / "report.json"
    if _up_to_date(out, manifest, rerun) and report_path.is_file():
        return EvalReport.from_dict(json.loads(report_path.read_text(encoding="utf-8")))

    model, ckpt_manifest = load_checkpoint(ckpt)
    method = method or ckpt_manifest.get("method", "")
    manifest.write(out)
    testset = load_testset(test_path)
    report = evaluate(model, testset, method, out / "eval_items.jsonl", seeds)
    if self_assessment:
        stats = eval_self_assessment(model, testset, out / "self_assessment_items.jsonl")
        report = EvalReport(**{**report.__dict__, "self_assessment": stats})
    report_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    manifest.outputs = {"report": str(report_path)}
    manifest.status, manifest.finished_at = "complete", _now()
    manifest.write(out)
    return report


def cmd_eval(args: argparse.Namespace) -> int:
    seeds = [args.seed] if args.seed is not None else []
    report = run_eval(
        Path(args.ckpt), Path(args.data), Path(args.out), args.method, seeds, args.self_assessment, args.rerun
    )
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def _ablate_in_process(
    methods: Sequence[str], seeds: Sequence[int], config: TrainConfig, data_dir: Path, out: Path, rerun: bool
) -> List[EvalReport]:
    reports = []
    for method in methods:
        schedule = resolve(method)
        for seed in seeds:
            run_dir = run_dir_for(str(out), method, seed)
            try:
                ckpt = run_train(schedule, config.with_overrides(seed=seed), data_dir, run_dir, rerun)
                reports.append(run_eval(ckpt, data_dir, run_dir / "eval", schedule.method, [seed], True, rerun))
            except Exception as exc:
                logger.exception("Cell %s seed %d failed", method, seed)
                reports.append(EvalReport.failed(schedule.method, [seed], str(exc)))
    return reports


def _ablate_subprocess(
    methods: Sequence[str], seeds: Sequence[int], args: argparse.Namespace
) -> List[EvalReport]:
    jobs = [
        SweepJobConfig(
            method=method,
            seed=seed,
            data_dir=args.data,
            out_dir=args.out,
            config_path=args.config,
            rerun=args.rerun,
            verbose=args.verbose,
        )
        for method in methods
        for seed in seeds
    ]
    reports = []
    for result in SweepRunner().run_all(jobs, max_workers=args.jobs):
        if result.success and result.report_path:
            data = json.loads(Path(result.report_path).read_text(encoding="utf-8"))
            reports.append(EvalReport.from_dict(data))
        else:
            reports.append(EvalReport.failed(result.method, [result.seed], result.error or "failed"))
    return reports


def cmd_ablate(args: argparse.Namespace) -> int:
    config = TrainConfig()
    if args.config:
        config, _ = load_config(args.config)
    seeds = _split_list(args.seeds, int)
    if not seeds:
        raise UsageError("--seeds needs at least one seed")
    methods = [resolve(m).method for m in _split_list(args.methods)] if args.methods else list(method_names())
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise CorpusError(f"Data directory not found: {data_dir}")
    out = Path(args.out)
    manifest = RunManifest(
        command="ablate",
        config={"train": config.to_dict(), "methods": methods, "jobs": args.jobs},
        corpus_hashes=_hash_files([data_dir / "train.jsonl", data_dir / "test.jsonl"]),
        seeds=seeds,
        started_at=_now(),
    )
    manifest.write(out)
    logger.info("Sweeping %d method(s) x %d seed(s)", len(methods), len(seeds))

    if args.jobs > 1:
        reports = _ablate_subprocess(methods, seeds, args)
    else:
        reports = _ablate_in_process(methods, seeds, config, data_dir, out, args.rerun)

    table = report_table(reports)
    report_csv, report_txt = out / "report.csv", out / "report.txt"
    report_csv.write_text(table.csv_text, encoding="utf-8")
    report_txt.write_text(table.text, encoding="utf-8")
    print(table.text, end="")
    failed = sum(1 for r in reports if r.error is not None)
    if failed:
        logger.warning("%d of %d run(s) failed; marked in report.csv", failed, len(reports))

    manifest.outputs = {
        "report_csv": str(report_csv),
        "report_txt": str(report_txt),
        "runs": str(len(reports)),
        "failed_runs": str(failed),
    }
    manifest.output_hashes = _hash_files([report_csv, report_txt])
    manifest.status = "failed" if failed == len(reports) else "complete"
    manifest.finished_at = _now()
    manifest.write(out)
    return EXIT_OK if failed < len(reports) else EXIT_DATA


def score_line(line: str) -> Dict[str, Any]:
    """Reward breakdown for one JSON sample (``tokens`` or ``text``)."""
    row = json.loads(line)
    if "tokens" in row:
        tokens = [int(t) for t in row["tokens"]]
    else:
        tokens = VOCAB.encode(str(row["text"]))
    flags = RewardFlags.from_dict(row["flags"]) if "flags" in row else RewardFlags()
    out = total_reward(tokens, str(row["ground_truth"]), flags).to_dict()
    if "id" in row:
        out["id"] = row["id"]
    return out


def cmd_score(args: argparse.Namespace, stdin: TextIO = sys.stdin, stdout: TextIO = sys.stdout) -> int:
    for line_num, line in enumerate(stdin, 1):
        if not line.strip():
            continue
        try:
            result = score_line(line)
        except (ValueError, KeyError, TypeError, UnknownToken) as exc:
            logger.warning("Cannot score line %d: %s", line_num, exc)
            result = {"error": str(exc), "line": line_num}
        stdout.write(json.dumps(result, sort_keys=True) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pcl", description="Post-completion learning desk rig")
    level = parser.add_mutually_exclusive_group()
    level.add_argument("--verbose", action="store_true", help="debug logging")
    level.add_argument("--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen-data", help="build, validate and split a corpus")
    gen.add_argument("--n", type=int, default=2000)
    gen.add_argument("--kinds", default=TaskKind.MIXED.value, help="comma list of task kinds")
    gen.add_argument("--difficulty", default="2", help="comma list of digit counts")
    gen.add_argument("--teacher-corruption", default="0,0", help="ANSWER_RATE,SELFEVAL_RATE")
    gen.add_argument("--fractions", default="0.8,0.1,0.1")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--workers", type=int, default=1)
    gen.add_argument("--out", default="data")
    gen.add_argument("--rerun", action="store_true")
    gen.set_defaults(handler=cmd_gen_data)

    train = sub.add_parser("train", help="train one method")
    train.add_argument("--method")
    train.add_argument("--config")
    train.add_argument("--data", default="data")
    train.add_argument("--out", required=True)
    train.add_argument("--seed", type=int)
    train.add_argument("--epochs", type=int)
    train.add_argument("--rerun", action="store_true")
    train.set_defaults(handler=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", default="data")
    ev.add_argument("--self-assessment", action="store_true")
    ev.add_argument("--out", required=True)
    ev.add_argument("--method")
    ev.add_argument("--seed", type=int)
    ev.add_argument("--rerun", action="store_true")
    ev.set_defaults(handler=cmd_eval)

    ab = sub.add_parser("ablate", help="train and evaluate every method across seeds")
    ab.add_argument("--config")
    ab.add_argument("--data", default="data")
    ab.add_argument("--seeds", default="0,1,2")
    ab.add_argument("--methods", help="comma list; defaults to every method")
    ab.add_argument("--jobs", type=int, default=1)
    ab.add_argument("--out", required=True)
    ab.add_argument("--rerun", action="store_true")
    ab.set_defaults(handler=cmd_ablate)

    sc = sub.add_parser("score", help="score JSONL samples from stdin")
    sc.set_defaults(handler=cmd_score)
    return parser


def _log_dir(args: argparse.Namespace) -> Optional[Path]:
    out = getattr(args, "out", None)
    return Path(out) / "logs" if out else None


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    log_dir = _log_dir(args)
    _configure_runtime_logging(log_dir, level)
    _enable_fault_logging(log_dir)
    _install_exception_hook()

    try:
        return args.handler(args)
    except NumericFailure as exc:
        logger.error("%s (dump: %s)", exc, exc.dump_path)
        return EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        logger.error("Data error: %s", exc)
        return EXIT_DATA
    except ValueError as exc:
        logger.error("Usage error: %s", exc)
        return EXIT_USAGE
    finally:
        _disable_fault_logging()


if __name__ == "__main__":
    sys.exit(main())
