"""Tiny decoder-only transformer, masked losses, sampling and checkpoints.

The parameters live in an ``nn.Module``; torch autograd provides the exact
reverse-mode gradients. Vocabulary is small enough that every softmax and
KL is computed over the full vocabulary.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Collection, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from seqformat import PAD_ID, VOCAB

logger = logging.getLogger("pcl.model")

CHECKPOINT_SCHEMA_VERSION = 1
_DTYPES = {"float64": (torch.float64, "<f8"), "float32": (torch.float32, "<f4")}

KVCache = List[Tuple[torch.Tensor, torch.Tensor]]
TokenInput = Union[Sequence[int], torch.Tensor]


class EmptyMask(ValueError):
    """A loss was requested over a mask with no true positions."""


class ContextOverflow(ValueError):
    """Input or generation would exceed the context length."""


class CheckpointError(RuntimeError):
    """Checkpoint manifest and data disagree."""

    def __init__(self, message: str, detail: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message)
        self.detail = detail or {}


@dataclass(frozen=True)
class ModelConfig:
    """Hyper-shape of the decoder."""

    vocab_size: int = VOCAB.size
    context_length: int = 384
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 2
    precision: str = "float64"
    ln_eps: float = 1e-5

    def __post_init__(self) -> None:
        for name in ("vocab_size", "context_length", "d_model", "n_heads", "n_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.precision not in _DTYPES:
            raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {self.precision!r}")

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    @property
    def dtype(self) -> torch.dtype:
        return _DTYPES[self.precision][0]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        return cls(**data)


class CausalSelfAttention(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        d = config.d_model
        self.n_heads = config.n_heads
        self.head_dim = d // config.n_heads
        self.q = nn.Linear(d, d, bias=False)
        self.k = nn.Linear(d, d, bias=False)
        self.v = nn.Linear(d, d, bias=False)
        self.o = nn.Linear(d, d, bias=False)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(
        self, x: torch.Tensor, past: Optional[Tuple[torch.Tensor, torch.Tensor]] = None
    ) -> Tuple[torch.Tensor, Tuple[torch.Tensor, torch.Tensor]]:
        b, t, d = x.shape
        q, k, v = self._heads(self.q(x)), self._heads(self.k(x)), self._heads(self.v(x))
        if past is not None:
            k = torch.cat([past[0], k], dim=2)
            v = torch.cat([past[1], v], dim=2)
        s = k.shape[2]
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        # query i sits at absolute position s - t + i
        allowed = torch.ones(t, s, dtype=torch.bool, device=x.device).tril(diagonal=s - t)
        scores = scores.masked_fill(~allowed, float("-inf"))
        y = torch.softmax(scores, dim=-1) @ v
        return self.o(y.transpose(1, 2).reshape(b, t, d)), (k, v)


class MLPBlock(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.fc = nn.Linear(config.d_model, config.d_ff, bias=False)
        self.gelu = nn.GELU()
        self.proj = nn.Linear(config.d_ff, config.d_model, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(self.gelu(self.fc(x)))


class DecoderBlock(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.ln1 = nn.LayerNorm(config.d_model, eps=config.ln_eps)
        self.attn = CausalSelfAttention(config)
        self.ln2 = nn.LayerNorm(config.d_model, eps=config.ln_eps)
        self.mlp = MLPBlock(config)

    def forward(
        self, x: torch.Tensor, past: Optional[Tuple[torch.Tensor, torch.Tensor]] = None
    ) -> Tuple[torch.Tensor, Tuple[torch.Tensor, torch.Tensor]]:
        attended, present = self.attn(self.ln1(x), past)
        x = x + attended
        x = x + self.mlp(self.ln2(x))
        return x, present


@dataclass
class ForwardTrace:
    """Activations of one forward pass, still attached to the autograd graph."""

    tokens: Tuple[int, ...]
    embeddings: torch.Tensor
    block_outputs: List[torch.Tensor] = field(default_factory=list)
    logits: Optional[torch.Tensor] = None


class TinyDecoder(nn.Module):
    """Pre-norm decoder with learned positions and a tied output projection."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.pos_emb = nn.Embedding(config.context_length, config.d_model)
        self.blocks = nn.ModuleList([DecoderBlock(config) for _ in range(config.n_layers)])
        self.ln_f = nn.LayerNorm(config.d_model, eps=config.ln_eps)
        self.to(config.dtype)

    def _check(self, idx: torch.Tensor, start: int) -> None:
        if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= self.config.vocab_size):
            raise ValueError(f"Token id outside vocabulary of size {self.config.vocab_size}")
        if start + idx.shape[1] > self.config.context_length:
            raise ContextOverflow(
                f"Sequence of {start + idx.shape[1]} tokens exceeds context {self.config.context_length}"
            )

    def step(
        self, idx: torch.Tensor, past: Optional[KVCache] = None, start: int = 0
    ) -> Tuple[torch.Tensor, KVCache]:
        """Logits for ``idx`` [B, T] placed at positions ``start..``, with the new cache."""
        self._check(idx, start)
        positions = torch.arange(start, start + idx.shape[1], device=idx.device)
        x = self.tok_emb(idx) + self.pos_emb(positions)
        presents: KVCache = []
        for i, block in enumerate(self.blocks):
            x, present = block(x, None if past is None else past[i])
            presents.append(present)
        return self.ln_f(x) @ self.tok_emb.weight.T, presents

    def forward(self, idx: torch.Tensor) -> torch.Tensor:
        logits, _ = self.step(idx)
        return logits

    def trace(self, idx: torch.Tensor) -> ForwardTrace:
        self._check(idx, 0)
        positions = torch.arange(idx.shape[1], device=idx.device)
        x = self.tok_emb(idx) + self.pos_emb(positions)
        record = ForwardTrace(tokens=tuple(int(t) for t in idx[0]), embeddings=x)
        for block in self.blocks:
            x, _ = block(x)
            record.block_outputs.append(x)
        record.logits = self.ln_f(x) @ self.tok_emb.weight.T
        return record


def _as_batch(tokens: TokenInput) -> torch.Tensor:
    idx = torch.as_tensor(tokens, dtype=torch.long)
    return idx.unsqueeze(0) if idx.dim() == 1 else idx


def init_model(config: ModelConfig, seed: int) -> TinyDecoder:
    """Scaled-normal init; identical parameters for identical (config, seed)."""
    model = TinyDecoder(config)
    gen = torch.Generator().manual_seed(int(seed))
    out_std = 0.02 / math.sqrt(2 * config.n_layers)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name.endswith(("ln1.weight", "ln2.weight", "ln_f.weight")):
                param.fill_(1.0)
            elif name.endswith(("ln1.bias", "ln2.bias", "ln_f.bias")):
                param.zero_()
            else:
                std = out_std if name.endswith(("attn.o.weight", "mlp.proj.weight")) else 0.02
                param.copy_(torch.randn(param.shape, generator=gen, dtype=config.dtype) * std)
    return model


def frozen_copy(model: TinyDecoder) -> TinyDecoder:
    """Detached snapshot used as the KL reference."""
    ref = copy.deepcopy(model)
    ref.requires_grad_(False)
    ref.eval()
    return ref


def forward(model: TinyDecoder, tokens: TokenInput, with_trace: bool = False):
    """Logits [T, V] for one sequence, optionally with its ForwardTrace."""
    idx = _as_batch(tokens)
    if with_trace:
        record = model.trace(idx)
        return record.logits[0], record
    return model(idx)[0]


def _padded(items: Sequence[Tuple[Sequence[int], Sequence[bool]]]) -> Tuple[torch.Tensor, torch.Tensor]:
    width = max(len(tokens) for tokens, _ in items)
    idx = torch.full((len(items), width), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(items), width), dtype=torch.bool)
    for row, (tokens, values) in enumerate(items):
        if len(tokens) != len(values):
            raise ValueError(f"Mask length {len(values)} != token length {len(tokens)}")
        if len(values) and values[0]:
            raise ValueError("Position 0 has no prefix and cannot be a target")
        idx[row, : len(tokens)] = torch.as_tensor(list(tokens), dtype=torch.long)
        mask[row, : len(values)] = torch.as_tensor(list(values), dtype=torch.bool)
    return idx, mask


def target_logprobs(model: TinyDecoder, idx: torch.Tensor) -> torch.Tensor:
    """log P(x_t | x_<t) for t >= 1, shape [B, T-1]."""
    logits = model(idx)[:, :-1]
    return torch.log_softmax(logits, dim=-1).gather(-1, idx[:, 1:].unsqueeze(-1)).squeeze(-1)


def batch_masked_nll(
    model: TinyDecoder, items: Sequence[Tuple[Sequence[int], Sequence[bool]]]
) -> torch.Tensor:
    """Mean over items of the per-sequence mean masked NLL (differentiable).

    A mask is aligned with its tokens; ``mask[t]`` marks token t as a target
    predicted from tokens ``< t``. Padding only ever follows real tokens, so
    it never reaches a masked position.
    """
    if not items:
        raise EmptyMask("Empty batch")
    idx, mask = _padded(items)
    targets = mask[:, 1:]
    counts = targets.sum(dim=1)
    if bool((counts == 0).any()):
        raise EmptyMask("Every sequence needs at least one masked position")
    logp = target_logprobs(model, idx)
    per_seq = -(logp * targets).sum(dim=1) / counts
    return per_seq.mean()


def masked_nll(model: TinyDecoder, tokens: Sequence[int], mask: Sequence[bool]) -> torch.Tensor:
    return batch_masked_nll(model, [(tokens, mask)])


def masked_nll_with_grad(
    model: TinyDecoder, tokens: Sequence[int], mask: Sequence[bool]
) -> Tuple[float, Dict[str, torch.Tensor]]:
    """Loss value and its exact gradient for every named parameter."""
    loss = masked_nll(model, tokens, mask)
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params)
    return float(loss.item()), dict(zip(names, grads))


@dataclass
class LogProbResult:
    total: torch.Tensor
    per_token: torch.Tensor
    empty: bool


def logprob_of(model: TinyDecoder, full_tokens: Sequence[int], mask: Sequence[bool]) -> LogProbResult:
    """Sum of log P(token | prefix) over masked positions."""
    idx, m = _padded([(full_tokens, mask)])
    targets = m[0, 1:]
    if not bool(targets.any()):
        zero = torch.zeros((), dtype=model.config.dtype)
        return LogProbResult(total=zero, per_token=zero.new_zeros(0), empty=True)
    per_token = target_logprobs(model, idx)[0][targets]
    return LogProbResult(total=per_token.sum(), per_token=per_token, empty=False)


@dataclass(frozen=True)
class SampleResult:
    """Generated continuation (prompt excluded) and its sampling-time logprobs."""

    tokens: Tuple[int, ...]
    logprobs: Tuple[float, ...]
    stopped: bool

    @property
    def logprob_sum(self) -> float:
        return float(sum(self.logprobs))


def sample_batch(
    model: TinyDecoder,
    prompt: Sequence[int],
    n: int,
    stop_tokens: Collection[int],
    max_new: int,
    temperature: float = 1.0,
    rng: Optional[torch.Generator] = None,
    greedy: bool = False,
) -> List[SampleResult]:
    """``n`` continuations of one prompt, decoded together with a KV cache.

    Rows that hit a stop token keep decoding in lockstep, but nothing after
    their stop token is returned.
    """
    if temperature <= 0 and not greedy:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if n < 1 or max_new < 0:
        raise ValueError(f"Need n >= 1 and max_new >= 0, got n={n}, max_new={max_new}")
    if len(prompt) == 0:
        raise ValueError("Prompt must not be empty")
    if len(prompt) + max_new > model.config.context_length:
        raise ContextOverflow(
            f"prompt {len(prompt)} + max_new {max_new} exceeds context {model.config.context_length}"
        )

    stops = frozenset(int(t) for t in stop_tokens)
    tokens: List[List[int]] = [[] for _ in range(n)]
    logprobs: List[List[float]] = [[] for _ in range(n)]
    done = [False] * n
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            idx = torch.as_tensor(list(prompt), dtype=torch.long).unsqueeze(0).repeat(n, 1)
            logits, past = model.step(idx)
            last = logits[:, -1]
            position = len(prompt)
            for step_index in range(max_new):
                if greedy:
                    logp = torch.log_softmax(last, dim=-1)
                    choice = logp.argmax(dim=-1)
                else:
                    logp = torch.log_softmax(last / temperature, dim=-1)
                    choice = torch.multinomial(logp.exp(), 1, generator=rng).squeeze(-1)
                for row in range(n):
                    if done[row]:
                        continue
                    token_id = int(choice[row])
                    tokens[row].append(token_id)
                    logprobs[row].append(float(logp[row, token_id]))
                    done[row] = token_id in stops
                if all(done) or step_index == max_new - 1:
                    break
                logits, past = model.step(choice.unsqueeze(-1), past, position)
                last = logits[:, -1]
                position += 1
    finally:
        model.train(was_training)
    return [SampleResult(tuple(t), tuple(lp), d) for t, lp, d in zip(tokens, logprobs, done)]


def sample(
    model: TinyDecoder,
    prompt: Sequence[int],
    stop_tokens: Collection[int],
    max_new: int,
    temperature: float = 1.0,
    rng: Optional[torch.Generator] = None,
    greedy: bool = False,
) -> SampleResult:
    return sample_batch(model, prompt, 1, stop_tokens, max_new, temperature, rng, greedy)[0]


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_checkpoint(model: TinyDecoder, manifest_path: Union[str, Path], seed: int, **extra: Any) -> Path:
    """Write ``<name>.json`` (manifest) and ``<name>.bin`` (flat little-endian data)."""
    manifest_path = Path(manifest_path)
    data_path = manifest_path.with_suffix(".bin")
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    _, np_dtype = _DTYPES[model.config.precision]

    tensors = []
    chunks = []
    offset = 0
    for name, param in model.named_parameters():
        raw = param.detach().cpu().numpy().astype(np_dtype, copy=False).tobytes(order="C")
        tensors.append({"name": name, "shape": list(param.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    data_path.write_bytes(blob)

    manifest = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "config": model.config.to_dict(),
        "seed": int(seed),
        "precision": model.config.precision,
        "dtype": np_dtype,
        "data_file": data_path.name,
        "data_sha256": _sha256(blob),
        "tensors": tensors,
        **extra,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.debug("Saved checkpoint %s (%d bytes)", manifest_path, len(blob))
    return manifest_path


def load_checkpoint(manifest_path: Union[str, Path]) -> Tuple[TinyDecoder, Dict[str, Any]]:
    """Rebuild a model bit-exactly; any disagreement raises CheckpointError."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"Unreadable manifest {manifest_path}: {exc}") from exc

    if manifest.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointError(
            "Unsupported checkpoint schema",
            {"expected": CHECKPOINT_SCHEMA_VERSION, "found": manifest.get("schema_version")},
        )
    try:
        config = ModelConfig.from_dict(manifest["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"Invalid config in {manifest_path}: {exc}") from exc

    data_path = manifest_path.parent / manifest.get("data_file", manifest_path.with_suffix(".bin").name)
    try:
        blob = data_path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"Missing checkpoint data {data_path}: {exc}") from exc
    if _sha256(blob) != manifest.get("data_sha256"):
        raise CheckpointError(
            f"Checksum mismatch for {data_path}",
            {"expected": manifest.get("data_sha256"), "found": _sha256(blob)},
        )

    model = TinyDecoder(config)
    _, np_dtype = _DTYPES[config.precision]
    params = dict(model.named_parameters())
    declared = {entry["name"]: entry for entry in manifest.get("tensors", [])}
    if set(declared) != set(params):
        raise CheckpointError(
            "Tensor names do not match the model",
            {"missing": sorted(set(params) - set(declared)), "unexpected": sorted(set(declared) - set(params))},
        )
    with torch.no_grad():
        for name, param in params.items():
            entry = declared[name]
            if list(param.shape) != list(entry["shape"]):
                raise CheckpointError(
                    f"Shape mismatch for {name}", {"expected": list(param.shape), "found": entry["shape"]}
                )
            count = int(np.prod(entry["shape"], dtype=np.int64))
            end = entry["offset"] + entry["nbytes"]
            if entry["nbytes"] != count * np.dtype(np_dtype).itemsize or end > len(blob):
                raise CheckpointError(f"Byte range mismatch for {name}", dict(entry))
            array = np.frombuffer(blob, dtype=np_dtype, count=count, offset=entry["offset"])
            param.copy_(torch.from_numpy(array.reshape(entry["shape"]).copy()))
    return model, manifest


def parameter_vector(model: TinyDecoder) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])
