"""Tests for desk-scale training trends – slow, enabled with PCL_RUN_TRENDS=1.

Set PCL_TRENDS_DIR to keep corpora and runs between invocations; finished
runs are reused through their manifests.
"""

import os
import tempfile
import unittest
from pathlib import Path

import numpy as np

from cli import run_eval, run_train
from datagen import build_corpus, split
from schedules import resolve
from tasks import TaskKind, TeacherConfig
from train import DEFAULT_THRESHOLDS, dynamics_summary, read_metrics
from train_config import TrainConfig

SEEDS = (0, 1, 2)
METHODS = ("SFT", "SFT+RL", "PCL w/o eval SFT", "PCL w/o consistency", "PCL (Complete)")


@unittest.skipUnless(os.environ.get("PCL_RUN_TRENDS"), "set PCL_RUN_TRENDS=1 to run training trends")
class TestDeskTrends(unittest.TestCase):
    """Test method ordering and self-assessment on the desk corpus."""

    @classmethod
    def setUpClass(cls):
        keep = os.environ.get("PCL_TRENDS_DIR")
        cls._tmpdir = None if keep else tempfile.TemporaryDirectory()
        cls.root = Path(keep) if keep else Path(cls._tmpdir.name)
        cls.data = cls.root / "data"
        if not (cls.data / "test.jsonl").is_file():
            stats = build_corpus(cls.data / "corpus.jsonl", 8000, [TaskKind.MIXED], [2], TeacherConfig(), 0)
            split(stats.corpus_path, [0.8, 0.1, 0.1], 0, cls.data)

        cls.reports = {}
        cls.metrics = {}
        for method in METHODS:
            schedule = resolve(method)
            for seed in SEEDS:
                run_dir = cls.root / "runs" / schedule.slug / f"seed-{seed}"
                ckpt = run_train(schedule, TrainConfig(seed=seed), cls.data, run_dir, False)
                cls.reports[method, seed] = run_eval(
                    ckpt, cls.data, run_dir / "eval", schedule.method, [seed], method == "PCL (Complete)", False
                )
                cls.metrics[method, seed] = read_metrics(run_dir / "metrics.jsonl")

    @classmethod
    def tearDownClass(cls):
        if cls._tmpdir is not None:
            cls._tmpdir.cleanup()

    def _accuracies(self, method):
        return [self.reports[method, seed].accuracy for seed in SEEDS]

    def _mean(self, method):
        return float(np.mean(self._accuracies(method)))

    def test_method_ordering(self):
        pcl, sft_rl, sft = self._mean("PCL (Complete)"), self._mean("SFT+RL"), self._mean("SFT")
        self.assertGreaterEqual(pcl, sft_rl)
        self.assertGreaterEqual(sft_rl, sft)
        self.assertGreaterEqual(pcl - sft, 0.02)

    def test_self_assessment_internalized(self):
        for seed in SEEDS:
            stats = self.reports["PCL (Complete)", seed].self_assessment
            self.assertGreaterEqual(stats.mean_consistency, 0.8)
            self.assertGreaterEqual(stats.full_format_rate, 0.9)

    def test_ablations_do_not_beat_complete(self):
        complete = self._accuracies("PCL (Complete)")
        worse_than = []
        for method in ("PCL w/o eval SFT", "PCL w/o consistency"):
            other = self._accuracies(method)
            pooled = float(np.sqrt((np.var(complete) + np.var(other)) / 2))
            if np.mean(complete) < np.mean(other) - pooled:
                worse_than.append(method)
        self.assertLess(len(worse_than), 2, f"complete method trails {worse_than}")

    def test_format_converges_before_accuracy(self):
        for seed in SEEDS:
            summary = dynamics_summary(self.metrics["PCL (Complete)", seed], DEFAULT_THRESHOLDS)
            fmt = summary.first_crossing["r_f_reason"]
            acc = summary.first_crossing["r_a"]
            self.assertIsNotNone(fmt)
            if acc is not None:
                self.assertLessEqual(fmt, acc)

    def test_gradient_norm_decreases(self):
        for seed in SEEDS:
            summary = dynamics_summary(self.metrics["PCL (Complete)", seed])
            self.assertTrue(summary.grad_norm_decreased)

    def test_kl_non_negative_on_every_step(self):
        for (method, _), rows in self.metrics.items():
            for row in rows:
                if row.get("kl") is not None:
                    self.assertGreaterEqual(row["kl"], 0.0, method)


if __name__ == "__main__":
    unittest.main()
