"""Shared builders for tests: tiny models, sample sequences, temp corpora."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import torch

from datagen import build_corpus, make_record, split
from model import ModelConfig, TinyDecoder, init_model
from seqformat import VOCAB, RenderMode, render
from tasks import TaskKind, TeacherConfig, gen_instance, teacher_generate


def tiny_config(context_length: int = 128, d_model: int = 16, n_heads: int = 2, n_layers: int = 2) -> ModelConfig:
    return ModelConfig(context_length=context_length, d_model=d_model, n_heads=n_heads, n_layers=n_layers)


def tiny_model(seed: int = 0, **shape) -> TinyDecoder:
    return init_model(tiny_config(**shape), seed)


def scripted_model(script: Sequence[int], context_length: int = 256, eps: float = 1e-3, c: float = 10.0) -> TinyDecoder:
    """Decoder whose greedy continuation of ``script[:k]`` is ``script[k:]``.

    Attention and MLP weights are zero, so the residual stream at position t
    is ``E[x_t] + P[t]``. Token embeddings are ``eps * onehot`` and position t
    holds ``c * onehot(script[t + 1])``, so after the final LayerNorm the tied
    output ranks the scripted next token first.
    """
    config = ModelConfig(context_length=context_length, d_model=64, n_heads=4, n_layers=2)
    if len(script) > context_length:
        raise ValueError("script longer than context")
    model = init_model(config, 0)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if ".attn." in name or ".mlp." in name:
                param.zero_()
        model.tok_emb.weight.zero_()
        for token_id in range(VOCAB.size):
            model.tok_emb.weight[token_id, token_id] = eps
        model.pos_emb.weight.zero_()
        for t, next_id in enumerate(script[1:]):
            model.pos_emb.weight[t, next_id] = c
    return model


def sample_instance(kind: TaskKind = TaskKind.ADDITION, difficulty: int = 1, seed: int = 3):
    return gen_instance(seed, kind, difficulty)


def sample_full_tokens(kind: TaskKind = TaskKind.ADDITION, difficulty: int = 1, seed: int = 3):
    inst = sample_instance(kind, difficulty, seed)
    return inst, render(teacher_generate(inst, TeacherConfig()), RenderMode.FULL)


def sample_records(n: int = 4, kind: TaskKind = TaskKind.ADDITION, difficulty: int = 1, **teacher) -> list:
    cfg = TeacherConfig(**teacher)
    return [make_record(i, gen_instance(100 + i, kind, difficulty), cfg, 0) for i in range(n)]


def write_dataset(out_dir: Path, n: int = 20, seed: int = 0, **teacher) -> Path:
    """Small corpus split into train/dev/test under ``out_dir``."""
    cfg = TeacherConfig(seed=seed, **teacher)
    stats = build_corpus(out_dir / "corpus.jsonl", n, [TaskKind.ADDITION], [1], cfg, seed)
    split(stats.corpus_path, [0.6, 0.2, 0.2], seed, out_dir)
    return out_dir
