"""Tests for evalinfer.py – greedy inference, evaluation and report tables."""

import csv
import dataclasses
import io
import json
import tempfile
import unittest
from pathlib import Path

from corpus_io import JsonlReader
from evalinfer import (
    CSV_COLUMNS,
    EvalReport,
    SelfAssessmentStats,
    eval_self_assessment,
    evaluate,
    generate_full,
    infer,
    load_testset,
    replay,
    report_table,
)
from helpers import sample_full_tokens, scripted_model, tiny_model, write_dataset
from seqformat import EOS_ID, POST_COMPLETION_ID, prompt_tokens
from tasks import TaskKind


def _report(method, accuracy, seed=0, **kwargs):
    return EvalReport(method, accuracy, 1.0, 40.0, 10, seeds=(seed,), **kwargs)


class TestInference(unittest.TestCase):
    """Test the deployment and full-generation decoding paths."""

    def setUp(self):
        self.inst, self.tokens = sample_full_tokens()
        self.model = scripted_model(self.tokens)
        self.prompt = prompt_tokens(self.inst.question)

    def test_infer_stops_at_post_completion(self):
        result = infer(self.model, self.inst.question)
        self.assertEqual(result.answer, self.inst.ground_truth)
        self.assertEqual(result.tokens[-1], POST_COMPLETION_ID)
        self.assertEqual(result.n_tokens, len(result.tokens))

    def test_inference_is_strict_prefix_of_full_generation(self):
        short = infer(self.model, self.inst.question).tokens
        full = generate_full(self.model, self.inst.question)
        self.assertLess(len(short), len(full))
        self.assertEqual(full[: len(short)], short)
        self.assertEqual(full[-1], EOS_ID)
        self.assertEqual(tuple(self.prompt) + full, tuple(self.tokens))

    def test_long_sequence_decoded_to_eos_by_default(self):
        inst, tokens = sample_full_tokens(TaskKind.MIXED, 4, seed=11)
        model = scripted_model(tokens, context_length=384)
        full = generate_full(model, inst.question)
        self.assertEqual(tuple(prompt_tokens(inst.question)) + full, tuple(tokens))
        self.assertEqual(full[-1], EOS_ID)

    def test_max_new_caps_generation(self):
        self.assertEqual(infer(self.model, self.inst.question, max_new=3).n_tokens, 3)


class TestEvaluate(unittest.TestCase):
    """Test accuracy and self-assessment scoring over a test set."""

    def setUp(self):
        self.inst, self.tokens = sample_full_tokens()
        self.model = scripted_model(self.tokens)
        self.tmpdir = tempfile.TemporaryDirectory()
        self.out = Path(self.tmpdir.name)

    def tearDown(self):
        self.tmpdir.cleanup()

    def test_scripted_model_is_exact(self):
        log = self.out / "items.jsonl"
        report = evaluate(self.model, [self.inst], "PCL (Complete)", log, seeds=[0])
        self.assertEqual(report.accuracy, 1.0)
        self.assertEqual(report.reasoning_format_rate, 1.0)
        self.assertEqual(report.n_items, 1)
        rows = JsonlReader().read(log)
        self.assertEqual(rows[0]["answer"], self.inst.ground_truth)
        self.assertEqual(rows[0]["correct"], 1)

    def test_self_assessment_is_consistent(self):
        stats = eval_self_assessment(self.model, [self.inst], self.out / "sa.jsonl")
        self.assertEqual(stats.full_format_rate, 1.0)
        self.assertEqual(stats.mean_consistency, 1.0)
        self.assertEqual(stats.selfeval_valid_rate, 1.0)
        prompt = prompt_tokens(self.inst.question)
        self.assertEqual(stats.mean_full_tokens, len(self.tokens) - len(prompt))

    def test_replay_matches_generation(self):
        prompt = prompt_tokens(self.inst.question)
        replayed = replay([self.tokens], [self.inst.ground_truth], [len(prompt)])
        self.assertEqual(replayed, eval_self_assessment(self.model, [self.inst]))

    def test_wrong_ground_truth(self):
        other = dataclasses.replace(self.inst, ground_truth="999")
        self.assertEqual(evaluate(self.model, [other]).accuracy, 0.0)

    def test_untrained_model_stays_in_range(self):
        report = evaluate(tiny_model(), [self.inst], max_new=20)
        self.assertIn(report.accuracy, (0.0, 1.0))
        self.assertLessEqual(report.mean_generated_tokens, 20)

    def test_empty_testset(self):
        with self.assertRaises(ValueError):
            evaluate(self.model, [])
        with self.assertRaises(ValueError):
            eval_self_assessment(self.model, [])

    def test_load_testset(self):
        data = write_dataset(self.out / "data", n=10)
        tasks = load_testset(data / "test.jsonl")
        self.assertEqual(len(tasks), 2)
        self.assertTrue(all(task.question.endswith("=?") for task in tasks))


class TestEvalReport(unittest.TestCase):
    """Test report validation and serialization."""

    def test_round_trip(self):
        stats = SelfAssessmentStats(0.9, 0.8, 1.0, 50.0, 10)
        report = _report("SFT", 0.5, self_assessment=stats)
        self.assertEqual(EvalReport.from_dict(json.loads(json.dumps(report.to_dict()))), report)

    def test_rates_in_range(self):
        with self.assertRaises(ValueError):
            _report("SFT", 1.5)

    def test_failed(self):
        report = EvalReport.failed("SFT", [1], "boom")
        self.assertEqual(report.error, "boom")
        self.assertEqual(report.seeds, (1,))


class TestReportTable(unittest.TestCase):
    """Test the ablation table with improvement rows."""

    def test_rows_and_deltas(self):
        table = report_table([_report("PCL (Complete)", 0.8), _report("SFT", 0.5), _report("SFT+RL", 0.6)])
        methods = [row["method"] for row in table.rows]
        self.assertEqual(methods, ["SFT", "SFT+RL", "PCL (Complete)", "Improvement vs. SFT", "Improvement vs. SFT+RL"])
        self.assertAlmostEqual(table.rows[3]["accuracy"], 0.3, delta=1e-12)
        self.assertAlmostEqual(table.rows[4]["accuracy"], 0.2, delta=1e-12)
        self.assertEqual(table.notes, [])
        parsed = list(csv.DictReader(io.StringIO(table.csv_text)))
        self.assertEqual(list(parsed[0]), list(CSV_COLUMNS))
        self.assertEqual(len(parsed), 5)

    def test_seeds_pooled_per_method(self):
        table = report_table([_report("SFT", 0.4, 0), _report("SFT", 0.6, 1)])
        row = table.rows[0]
        self.assertAlmostEqual(row["accuracy"], 0.5, delta=1e-12)
        self.assertAlmostEqual(row["accuracy_std"], 0.1, delta=1e-12)
        self.assertEqual(row["seeds"], "0 1")

    def test_missing_baseline_noted(self):
        table = report_table([_report("SFT", 0.5), _report("PCL (Complete)", 0.7)])
        self.assertEqual(len(table.rows), 3)
        self.assertEqual(len(table.notes), 1)
        self.assertIn("SFT+RL", table.notes[0])
        self.assertIn("note:", table.text)

    def test_failed_runs_marked(self):
        table = report_table(
            [_report("SFT", 0.5), EvalReport.failed("SFT+RL", [0], "exit 3"), _report("PCL (Complete)", 0.7)]
        )
        failed = [row for row in table.rows if row["method"] == "SFT+RL"][0]
        self.assertEqual(failed["status"], "failed")
        self.assertEqual(failed["accuracy"], "")

    def test_partial_failures(self):
        table = report_table([_report("SFT", 0.5, 0), EvalReport.failed("SFT", [1], "exit 3")])
        self.assertEqual(table.rows[0]["status"], "partial (1 failed)")
        self.assertEqual(table.rows[0]["accuracy"], 0.5)

    def test_empty(self):
        with self.assertRaises(ValueError):
            report_table([])


if __name__ == "__main__":
    unittest.main()
