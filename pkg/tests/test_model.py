"""Tests for model.py – decoder forward, masked losses, sampling, checkpoints."""

import json
import math
import random
import tempfile
import unittest
from pathlib import Path

import torch

from helpers import sample_full_tokens, scripted_model, tiny_config, tiny_model
from model import (
    CheckpointError,
    ContextOverflow,
    EmptyMask,
    ModelConfig,
    TinyDecoder,
    batch_masked_nll,
    forward,
    frozen_copy,
    init_model,
    load_checkpoint,
    logprob_of,
    masked_nll,
    masked_nll_with_grad,
    parameter_vector,
    sample,
    sample_batch,
    save_checkpoint,
)
from seqformat import (
    EOS_ID,
    POST_COMPLETION_ID,
    REASONING_SECTIONS,
    REFLECTION_SECTIONS,
    VOCAB,
    prompt_tokens,
    section_mask,
)


def _scaled(model: TinyDecoder, factor: float = 10.0) -> TinyDecoder:
    with torch.no_grad():
        for name, param in model.named_parameters():
            if "ln" not in name:
                param.mul_(factor)
    return model


def _finite_difference_check(testcase, model, loss_fn, checks=200, eps=1e-5, seed=0):
    loss = loss_fn()
    names, params = zip(*model.named_parameters())
    grads = dict(zip(names, torch.autograd.grad(loss, params)))
    rng = random.Random(seed)
    worst = 0.0
    with torch.no_grad():
        for _ in range(checks):
            name = rng.choice(names)
            param = dict(model.named_parameters())[name]
            flat = param.view(-1)
            i = rng.randrange(flat.numel())
            original = float(flat[i])
            flat[i] = original + eps
            up = float(loss_fn())
            flat[i] = original - eps
            down = float(loss_fn())
            flat[i] = original
            numeric = (up - down) / (2 * eps)
            analytic = float(grads[name].view(-1)[i])
            worst = max(worst, abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-4))
    testcase.assertLess(worst, 1e-5)


class TestModelConfig(unittest.TestCase):
    """Test shape validation."""

    def test_defaults(self):
        config = ModelConfig()
        self.assertEqual(config.vocab_size, 55)
        self.assertEqual(config.d_ff, 512)
        self.assertEqual(config.dtype, torch.float64)

    def test_invalid(self):
        with self.assertRaises(ValueError):
            ModelConfig(d_model=10, n_heads=4)
        with self.assertRaises(ValueError):
            ModelConfig(precision="float16")
        with self.assertRaises(ValueError):
            ModelConfig(n_layers=0)


class TestForward(unittest.TestCase):
    """Test determinism, causality and the KV cache."""

    def test_init_deterministic(self):
        a = parameter_vector(init_model(tiny_config(), 3))
        b = parameter_vector(init_model(tiny_config(), 3))
        c = parameter_vector(init_model(tiny_config(), 4))
        self.assertTrue(torch.equal(a, b))
        self.assertFalse(torch.equal(a, c))

    def test_init_moments(self):
        config = ModelConfig()
        model = init_model(config, 0)
        residual_out = torch.cat([
            p.detach().view(-1) for n, p in model.named_parameters() if n.endswith(("attn.o.weight", "mlp.proj.weight"))
        ])
        expected = 0.02 / math.sqrt(2 * config.n_layers)
        self.assertAlmostEqual(float(residual_out.std()), expected, delta=0.02 * expected)
        self.assertLess(abs(float(residual_out.mean())), 0.02 * expected)
        for name in ("tok_emb.weight", "pos_emb.weight", "blocks.0.attn.q.weight", "blocks.1.mlp.fc.weight"):
            values = dict(model.named_parameters())[name].detach()
            self.assertAlmostEqual(float(values.std()), 0.02, delta=0.001, msg=name)
        for name, param in model.named_parameters():
            if name.endswith(".bias"):
                self.assertTrue(torch.equal(param, torch.zeros_like(param)), name)
            elif name.startswith("ln_f") or ".ln" in name:
                self.assertTrue(torch.equal(param, torch.ones_like(param)), name)

    def test_logit_shape(self):
        logits = forward(tiny_model(), [1, 12, 13, 14])
        self.assertEqual(tuple(logits.shape), (4, VOCAB.size))

    def test_causality(self):
        model = _scaled(tiny_model(seed=1))
        rng = random.Random(2)
        prefix = [1] + [rng.randrange(3, VOCAB.size) for _ in range(10)]
        base = forward(model, prefix)
        for _ in range(5):
            suffix = [rng.randrange(3, VOCAB.size) for _ in range(rng.randrange(1, 20))]
            extended = forward(model, prefix + suffix)
            self.assertTrue(torch.allclose(base, extended[: len(prefix)], atol=1e-12, rtol=0))

    def test_kv_cache_matches_full_forward(self):
        model = _scaled(tiny_model(seed=2))
        tokens = [1, 12, 50, 22, 23, 30, 14, 40]
        full = forward(model, tokens)
        idx = torch.tensor([tokens[:3]])
        logits, past = model.step(idx)
        pieces = [logits[0]]
        for position in range(3, len(tokens)):
            logits, past = model.step(torch.tensor([[tokens[position]]]), past, position)
            pieces.append(logits[0])
        self.assertTrue(torch.allclose(torch.cat(pieces), full, atol=1e-12, rtol=0))

    def test_trace(self):
        model = tiny_model()
        logits, trace = forward(model, [1, 12, 13], with_trace=True)
        self.assertEqual(len(trace.block_outputs), model.config.n_layers)
        self.assertTrue(torch.equal(logits, forward(model, [1, 12, 13])))

    def test_context_overflow(self):
        model = tiny_model(context_length=8)
        with self.assertRaises(ContextOverflow):
            forward(model, [1] * 9)

    def test_out_of_vocab(self):
        with self.assertRaises(ValueError):
            forward(tiny_model(), [1, VOCAB.size])


class TestMaskedLoss(unittest.TestCase):
    """Test masked NLL values, isolation and gradients."""

    def setUp(self):
        self.inst, self.tokens = sample_full_tokens()
        self.reasoning = section_mask(self.tokens, REASONING_SECTIONS).values
        self.reflection = section_mask(self.tokens, REFLECTION_SECTIONS).values

    def test_uniform_model_gives_log_vocab(self):
        model = tiny_model()
        with torch.no_grad():
            model.tok_emb.weight.zero_()
        for mask in (self.reasoning, self.reflection):
            self.assertAlmostEqual(float(masked_nll(model, self.tokens, mask)), math.log(VOCAB.size), delta=1e-12)

    def test_tokens_after_mask_do_not_matter(self):
        model = _scaled(tiny_model(seed=5))
        cut = self.tokens.index(POST_COMPLETION_ID) + 1
        full_loss = float(masked_nll(model, self.tokens, self.reasoning))
        prefix_loss = float(masked_nll(model, self.tokens[:cut], self.reasoning[:cut]))
        self.assertAlmostEqual(full_loss, prefix_loss, delta=1e-12)

    def test_only_masked_targets_count(self):
        model = _scaled(tiny_model(seed=5))
        logp = torch.log_softmax(forward(model, self.tokens)[:-1], dim=-1)
        per_token = [float(logp[t - 1, self.tokens[t]]) for t in range(1, len(self.tokens))]
        masked = [lp for lp, on in zip(per_token, self.reflection[1:]) if on]
        expected = -sum(masked) / len(masked)
        self.assertAlmostEqual(float(masked_nll(model, self.tokens, self.reflection)), expected, delta=1e-12)

    def test_padding_does_not_leak_into_batch_mean(self):
        model = _scaled(tiny_model(seed=5))
        cut = self.tokens.index(POST_COMPLETION_ID)
        short = (self.tokens[: cut + 1], [False] * cut + [True])
        base = float(masked_nll(model, self.tokens, self.reflection))
        single = float(masked_nll(model, *short))
        batch = float(batch_masked_nll(model, [(self.tokens, self.reflection), short]))
        self.assertAlmostEqual(batch, (base + single) / 2, delta=1e-12)

    def test_empty_mask(self):
        with self.assertRaises(EmptyMask):
            masked_nll(tiny_model(), self.tokens, [False] * len(self.tokens))

    def test_position_zero_cannot_be_target(self):
        with self.assertRaises(ValueError):
            masked_nll(tiny_model(), self.tokens, [True] * len(self.tokens))

    def test_logprob_of_matches_nll(self):
        model = _scaled(tiny_model(seed=6))
        result = logprob_of(model, self.tokens, self.reasoning)
        count = sum(self.reasoning)
        self.assertAlmostEqual(-float(result.total) / count, float(masked_nll(model, self.tokens, self.reasoning)),
                               delta=1e-12)
        empty = logprob_of(model, self.tokens, [False] * len(self.tokens))
        self.assertTrue(empty.empty)
        self.assertEqual(float(empty.total), 0.0)

    def test_gradient_reasoning_track(self):
        model = _scaled(tiny_model(seed=7))
        _finite_difference_check(self, model, lambda: masked_nll(model, self.tokens, self.reasoning), seed=1)

    def test_gradient_evaluation_track(self):
        model = _scaled(tiny_model(seed=8))
        _finite_difference_check(self, model, lambda: masked_nll(model, self.tokens, self.reflection), seed=2)

    def test_masked_nll_with_grad(self):
        model = tiny_model()
        value, grads = masked_nll_with_grad(model, self.tokens, self.reasoning)
        self.assertAlmostEqual(value, float(masked_nll(model, self.tokens, self.reasoning)), delta=1e-12)
        self.assertEqual(set(grads), {name for name, _ in model.named_parameters()})


class TestSampling(unittest.TestCase):
    """Test seeded and greedy generation."""

    def test_seeded_sampling_is_reproducible(self):
        model = _scaled(tiny_model(seed=9))
        prompt = prompt_tokens("3+4=?")
        a = sample_batch(model, prompt, 4, {EOS_ID}, 20, 1.0, torch.Generator().manual_seed(1))
        b = sample_batch(model, prompt, 4, {EOS_ID}, 20, 1.0, torch.Generator().manual_seed(1))
        self.assertEqual([r.tokens for r in a], [r.tokens for r in b])
        self.assertEqual([r.logprobs for r in a], [r.logprobs for r in b])

    def test_stop_token_ends_row(self):
        model = _scaled(tiny_model(seed=9))
        for result in sample_batch(model, [1], 8, {EOS_ID, POST_COMPLETION_ID}, 30, 1.0,
                                   torch.Generator().manual_seed(2)):
            if result.stopped:
                self.assertIn(result.tokens[-1], (EOS_ID, POST_COMPLETION_ID))
                self.assertEqual(sum(t in (EOS_ID, POST_COMPLETION_ID) for t in result.tokens), 1)
            else:
                self.assertEqual(len(result.tokens), 30)

    def test_logprobs_are_log_probabilities(self):
        model = _scaled(tiny_model(seed=9))
        result = sample(model, [1], {EOS_ID}, 10, 1.0, torch.Generator().manual_seed(3))
        self.assertTrue(all(lp <= 0.0 for lp in result.logprobs))
        self.assertEqual(len(result.logprobs), len(result.tokens))

    def test_sampling_logprobs_match_teacher_forcing(self):
        model = _scaled(tiny_model(seed=12))
        rng = random.Random(4)
        gen = torch.Generator().manual_seed(5)
        for _ in range(10):
            prompt = [1] + [rng.randrange(3, VOCAB.size) for _ in range(rng.randrange(1, 12))]
            result = sample(model, prompt, {EOS_ID}, 25, 1.0, gen)
            full = list(prompt) + list(result.tokens)
            mask = [False] * len(prompt) + [True] * len(result.tokens)
            scored = logprob_of(model, full, mask).per_token
            self.assertEqual(len(scored), len(result.logprobs))
            for sampled, forced in zip(result.logprobs, scored.tolist()):
                self.assertAlmostEqual(sampled, forced, delta=1e-9)

    def test_scripted_greedy_generation(self):
        inst, tokens = sample_full_tokens()
        model = scripted_model(tokens)
        prompt = prompt_tokens(inst.question)
        result = sample(model, prompt, {EOS_ID}, 200, greedy=True)
        self.assertEqual(list(prompt) + list(result.tokens), list(tokens))
        self.assertTrue(result.stopped)

    def test_context_overflow(self):
        model = tiny_model(context_length=16)
        with self.assertRaises(ContextOverflow):
            sample(model, [1] * 10, {EOS_ID}, 10)

    def test_invalid_arguments(self):
        with self.assertRaises(ValueError):
            sample(tiny_model(), [], {EOS_ID}, 4)
        with self.assertRaises(ValueError):
            sample(tiny_model(), [1], {EOS_ID}, 4, temperature=0.0)

    def test_training_mode_restored(self):
        model = tiny_model()
        model.train()
        sample(model, [1], {EOS_ID}, 3, greedy=True)
        self.assertTrue(model.training)

    def test_frozen_copy(self):
        model = tiny_model()
        ref = frozen_copy(model)
        self.assertFalse(any(p.requires_grad for p in ref.parameters()))
        self.assertTrue(torch.equal(parameter_vector(ref), parameter_vector(model)))


class TestCheckpoint(unittest.TestCase):
    """Test the manifest + flat-array checkpoint format."""

    def setUp(self):
        self.tmpdir = tempfile.TemporaryDirectory()
        self.path = Path(self.tmpdir.name) / "ckpt" / "final.json"
        self.model = tiny_model(seed=11)
        save_checkpoint(self.model, self.path, 11, step=3, method="SFT")

    def tearDown(self):
        self.tmpdir.cleanup()

    def test_round_trip_is_exact(self):
        loaded, manifest = load_checkpoint(self.path)
        self.assertTrue(torch.equal(parameter_vector(loaded), parameter_vector(self.model)))
        self.assertEqual(loaded.config, self.model.config)
        self.assertEqual(manifest["method"], "SFT")
        self.assertEqual(manifest["dtype"], "<f8")

    def test_corrupt_data(self):
        data = self.path.with_suffix(".bin")
        blob = bytearray(data.read_bytes())
        blob[0] ^= 0xFF
        data.write_bytes(bytes(blob))
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)

    def test_shape_mismatch(self):
        manifest = json.loads(self.path.read_text(encoding="utf-8"))
        manifest["tensors"][0]["shape"] = [1, 1]
        self.path.write_text(json.dumps(manifest), encoding="utf-8")
        with self.assertRaises(CheckpointError) as ctx:
            load_checkpoint(self.path)
        self.assertIn("expected", ctx.exception.detail)

    def test_missing_data_file(self):
        self.path.with_suffix(".bin").unlink()
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)

    def test_unreadable_manifest(self):
        self.path.write_text("{not json", encoding="utf-8")
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)


if __name__ == "__main__":
    unittest.main()
