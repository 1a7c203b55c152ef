"""Ablation sweep jobs: command building and subprocess execution."""

from __future__ import annotations

import logging
import subprocess
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence

from schedules import resolve

CLI_PATH = Path(__file__).resolve().parent / "cli.py"


@dataclass(frozen=True)
class SweepJobConfig:
    """Immutable configuration for one (method, seed) cell of the sweep."""

    method: str
    seed: int
    data_dir: str
    out_dir: str
    config_path: Optional[str] = None
    self_assessment: bool = True
    rerun: bool = False
    verbose: bool = False


@dataclass(frozen=True)
class SweepJobResult:
    """Immutable result of one sweep cell."""

    success: bool
    return_code: int
    method: str
    seed: int
    run_dir: Optional[str] = None
    report_path: Optional[str] = None
    stdout: str = ""
    stderr: str = ""
    error: Optional[str] = None


def run_dir_for(out_dir: str, method: str, seed: int) -> Path:
    return Path(out_dir) / resolve(method).slug / f"seed-{seed}"


class SweepRunner:
    """Builds and executes train/eval commands for sweep cells."""

    def __init__(self, python: str = sys.executable) -> None:
        self.logger = logging.getLogger("pcl.sweep")
        self.python = python
        self._processes: List[subprocess.Popen] = []
        self._cancel_requested = False
        self._lock = threading.Lock()

    @staticmethod
    def _validate(job: SweepJobConfig) -> None:
        resolve(job.method)
        if not isinstance(job.seed, int) or job.seed < 0:
            raise ValueError(f"Invalid seed: {job.seed}")
        for label, value in (("data_dir", job.data_dir), ("out_dir", job.out_dir), ("config", job.config_path)):
            if value is not None and ".." in Path(value).parts:
                raise ValueError(f"Path traversal sequences not allowed in {label}")

    def build_train_command(self, job: SweepJobConfig) -> List[str]:
        """Validated ``cli.py train`` argument list."""
        self._validate(job)
        cmd = [self.python, str(CLI_PATH)]
        if job.verbose:
            cmd.append("--verbose")
        cmd.extend(["train", "--method", job.method, "--data", job.data_dir])
        cmd.extend(["--out", str(run_dir_for(job.out_dir, job.method, job.seed)), "--seed", str(job.seed)])
        if job.config_path:
            cmd.extend(["--config", job.config_path])
        if job.rerun:
            cmd.append("--rerun")
        return cmd

    def build_eval_command(self, job: SweepJobConfig) -> List[str]:
        """Validated ``cli.py eval`` argument list for the job's final checkpoint."""
        self._validate(job)
        run_dir = run_dir_for(job.out_dir, job.method, job.seed)
        cmd = [self.python, str(CLI_PATH)]
        if job.verbose:
            cmd.append("--verbose")
        cmd.extend(["eval", "--ckpt", str(run_dir / "checkpoints" / "final.json"), "--data", job.data_dir])
        cmd.extend(["--out", str(run_dir / "eval"), "--method", job.method, "--seed", str(job.seed)])
        if job.self_assessment:
            cmd.append("--self-assessment")
        if job.rerun:
            cmd.append("--rerun")
        return cmd

    def _execute(self, cmd: List[str]) -> subprocess.CompletedProcess:
        self.logger.info("Running: %s", " ".join(cmd))
        process = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
        with self._lock:
            self._processes.append(process)
        try:
            stdout, stderr = process.communicate()
        finally:
            with self._lock:
                self._processes.remove(process)
        return subprocess.CompletedProcess(cmd, process.returncode, stdout, stderr)

    def run_job(self, job: SweepJobConfig) -> SweepJobResult:
        """Train then evaluate one cell; failures come back as results."""
        run_dir = None
        try:
            run_dir = str(run_dir_for(job.out_dir, job.method, job.seed))
            stdout: List[str] = []
            stderr: List[str] = []
            for stage, cmd in (("train", self.build_train_command(job)), ("eval", self.build_eval_command(job))):
                if self._cancel_requested:
                    return SweepJobResult(False, -1, job.method, job.seed, run_dir, error="Canceled")
                completed = self._execute(cmd)
                stdout.append(completed.stdout or "")
                stderr.append(completed.stderr or "")
                if completed.returncode != 0:
                    self.logger.warning(
                        "%s seed %d failed with exit code %d", job.method, job.seed, completed.returncode
                    )
                    return SweepJobResult(
                        success=False,
                        return_code=completed.returncode,
                        method=job.method,
                        seed=job.seed,
                        run_dir=run_dir,
                        stdout="".join(stdout),
                        stderr="".join(stderr),
                        error=f"{stage} exited with {completed.returncode}",
                    )
            return SweepJobResult(
                success=True,
                return_code=0,
                method=job.method,
                seed=job.seed,
                run_dir=run_dir,
                report_path=str(Path(run_dir) / "eval" / "report.json"),
                stdout="".join(stdout),
                stderr="".join(stderr),
            )
        except Exception as exc:
            self.logger.exception("Sweep job %s seed %d failed", job.method, job.seed)
            return SweepJobResult(False, -1, job.method, job.seed, run_dir, error=str(exc))

    def run_all(
        self,
        jobs: Sequence[SweepJobConfig],
        max_workers: int = 1,
        on_complete: Optional[Callable[[SweepJobResult], None]] = None,
    ) -> List[SweepJobResult]:
        """Run jobs ``max_workers`` at a time; results keep job order."""
        if max_workers < 1:
            raise ValueError(f"max_workers must be >= 1, got {max_workers}")
        with self._lock:
            self._cancel_requested = False

        def _one(job: SweepJobConfig) -> SweepJobResult:
            result = self.run_job(job)
            if on_complete is not None:
                on_complete(result)
            return result

        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            return list(pool.map(_one, jobs))

    def cancel(self) -> None:
        """Stop launching new commands and terminate running ones."""
        with self._lock:
            self._cancel_requested = True
            for process in self._processes:
                try:
                    process.terminate()
                except OSError:
                    pass
