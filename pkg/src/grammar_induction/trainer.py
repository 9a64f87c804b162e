"""Training loop: Adam with global-norm clipping, length curriculum, early stopping."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffmath as dm
from .chart import inside_logprob
from .diffmath import Tape, Tensor, backward
from .grammar import GrammarParams, GrammarSpec, compound_rule_logprobs, rule_logprobs
from .model import PCFGModel
from .posterior import EncoderParams, encode, kl_to_standard_normal, sample

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    model: str = "compound"
    epochs: int = 10
    batch_size: int = 4
    learning_rate: float = 0.001
    adam_beta1: float = 0.75
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float = 3.0
    curriculum_start_len: int = 30
    curriculum_increment: int = 1
    seed: int = 3435
    num_nonterminals: int = 30
    num_preterminals: int = 60
    symbol_dim: int = 256
    z_dim: int = 64
    encoder_hidden: int = 512
    encoder_embed_dim: int = 256
    vocab_cap: int = 10000
    early_stop_metric: str = "validation_perplexity"
    max_consecutive_skips: int = 50
    checkpoint_path: str = ""
    log_path: str = ""

    def __post_init__(self):
        if self.model not in ("scalar", "neural", "compound"):
            raise ValueError(f"unknown model kind {self.model!r}")
        for name in ("learning_rate", "adam_beta1", "adam_beta2", "grad_clip_norm"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.curriculum_start_len < 2:
            raise ValueError("curriculum_start_len must be >= 2")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def grammar_spec(self, vocab_size: int) -> GrammarSpec:
        return GrammarSpec(self.num_nonterminals, self.num_preterminals, vocab_size, self.symbol_dim,
                           self.z_dim if self.model == "compound" else 0)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            values[key] = {"int": int, "float": float}.get(types[key], str)(val)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by max_norm / norm when the global norm exceeds max_norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> bool:
    """One clipped Adam update (gradient *descent* on the given grads).

    Returns False and leaves everything untouched when a gradient is non-finite.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise dm.ShapeError(f"adam_step ({name})", g.shape, params[name].shape)
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient in %s; skipping update", name)
            return False
    grads, _ = clip_grad_norm(grads, config.grad_clip_norm)
    b1, b2 = config.adam_beta1, config.adam_beta2
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p = params[name]
        p.data = p.data - config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    return True


# ----------------------------------------------------------------- objectives


def elbo(sentence, grammar_params: GrammarParams, encoder_params: EncoderParams, noise) -> Tensor:
    """log p(x | z) - KL[q(z|x) || N(0, I)] with z = mean + std * noise."""
    post = encode(sentence, encoder_params)
    z = sample(post, noise)
    return dm.sub(inside_logprob(sentence, compound_rule_logprobs(grammar_params, z)),
                  kl_to_standard_normal(post))


def neural_objective(sentence, grammar_params: GrammarParams) -> Tensor:
    """Exact log marginal likelihood for the scalar and neural grammars."""
    if grammar_params.kind == "compound":
        raise ValueError("neural_objective is for scalar/neural grammars")
    return inside_logprob(sentence, rule_logprobs(grammar_params))


# ------------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    max_len: int
    train_objective: float
    valid_perplexity: float
    num_sentences: int
    skipped_batches: int


@dataclass
class TrainResult:
    model: PCFGModel
    best_epoch: int
    best_perplexity: float
    history: list[EpochRecord]
    visited: dict[int, list[int]]
    checkpoint: bytes

    def log_text(self) -> str:
        lines = ["epoch\tmax_len\ttrain_objective\tvalid_perplexity"]
        for r in self.history:
            lines.append(f"{r.epoch}\t{r.max_len}\t{r.train_objective:.10g}\t{r.valid_perplexity:.10g}")
        return "\n".join(lines) + "\n"


class TrainingAborted(RuntimeError):
    pass


def make_batches(lengths: Sequence[int], indices: Sequence[int], batch_size: int,
                 rng: np.random.Generator) -> list[list[int]]:
    """Shuffle, sort stably by length, chunk, then shuffle the chunk order."""
    idx = np.asarray(indices, dtype=np.int64)
    idx = idx[rng.permutation(len(idx))]
    idx = idx[np.argsort([lengths[i] for i in idx], kind="stable")]
    batches = [idx[i:i + batch_size].tolist() for i in range(0, len(idx), batch_size)]
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def _grouped(batch: list[int], sentences: Sequence[np.ndarray]) -> list[np.ndarray]:
    groups: dict[int, list[np.ndarray]] = {}
    for i in batch:
        groups.setdefault(len(sentences[i]), []).append(sentences[i])
    return [np.stack(groups[n]) for n in sorted(groups)]


def batch_objective(model: PCFGModel, batch_words: list[np.ndarray], rng: np.random.Generator | None) -> Tensor:
    """Sum of per-sentence objectives over length groups."""
    total = None
    for words in batch_words:
        part = dm.sum(model.objective(words, rng))
        total = part if total is None else dm.add(total, part)
    return total


def validation_perplexity(model: PCFGModel, sentences: Sequence[np.ndarray], seed: int,
                          group_size: int = 32) -> float:
    """exp(-sum objective / tokens); exact for scalar/neural, ELBO-based bound for compound."""
    if not sentences:
        return float("nan")
    rng = np.random.default_rng(seed)
    total, tokens = 0.0, 0
    by_len: dict[int, list[np.ndarray]] = {}
    for s in sentences:
        by_len.setdefault(len(s), []).append(s)
    for n in sorted(by_len):
        group = by_len[n]
        for i in range(0, len(group), group_size):
            words = np.stack(group[i:i + group_size])
            total += float(np.sum(model.objective(words, rng).data))
            tokens += words.size
    return math.exp(-total / tokens)


def train(config: TrainConfig, train_sentences: Sequence, valid_sentences: Sequence,
          vocab_size: int, meta: dict | None = None,
          on_batch: Callable[[int, list[int]], None] | None = None) -> TrainResult:
    """Fit a model; returns the early-stopped (best validation perplexity) model."""
    train_s = [np.asarray(getattr(s, "ids", s), dtype=np.int64) for s in train_sentences]
    valid_s = [np.asarray(getattr(s, "ids", s), dtype=np.int64) for s in valid_sentences]
    rng = np.random.default_rng(config.seed)
    model = PCFGModel.initialize(config.model, config.grammar_spec(vocab_size), rng,
                                 encoder_embed_dim=config.encoder_embed_dim,
                                 encoder_hidden=config.encoder_hidden)
    params = model.parameters()
    state = AdamState()
    lengths = [len(s) for s in train_s]
    history: list[EpochRecord] = []
    visited: dict[int, list[int]] = {}
    best_blob, best_ppl, best_epoch = None, math.inf, 0
    meta = dict(meta or {})
    # output locations are not part of the model; leaving them out keeps checkpoints
    # byte-identical wherever they are written
    cfg_meta = {k: v for k, v in dataclasses.asdict(config).items() if k not in ("checkpoint_path", "log_path")}
    meta.update(seed=config.seed, config=cfg_meta)
    consecutive_skips = 0

    for epoch in range(1, config.epochs + 1):
        max_len = config.curriculum_start_len + (epoch - 1) * config.curriculum_increment
        pool = [i for i, n in enumerate(lengths) if n <= max_len]
        if not pool:
            log.warning("epoch %d: no training sentences of length <= %d; skipping", epoch, max_len)
            continue
        visited[epoch] = []
        obj_sum, n_sent, skipped = 0.0, 0, 0
        for batch in make_batches(lengths, pool, config.batch_size, rng):
            if on_batch is not None:
                on_batch(epoch, batch)
            visited[epoch].extend(batch)
            with Tape() as tape:
                total = batch_objective(model, _grouped(batch, train_s), rng)
                loss = dm.mul(total, -1.0 / len(batch))
            if not np.isfinite(loss.item()):
                skipped += 1
                consecutive_skips += 1
                log.warning("epoch %d: non-finite loss; batch skipped", epoch)
                if consecutive_skips >= config.max_consecutive_skips:
                    raise TrainingAborted(f"{consecutive_skips} consecutive batches skipped")
                continue
            for p in params.values():
                p.grad = None
            backward(tape, loss)
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
            if adam_step(params, grads, state, config):
                consecutive_skips = 0
                obj_sum += float(total.item())
                n_sent += len(batch)
            else:
                skipped += 1
                consecutive_skips += 1
                if consecutive_skips >= config.max_consecutive_skips:
                    raise TrainingAborted(f"{consecutive_skips} consecutive batches skipped")
        ppl = validation_perplexity(model, valid_s, seed=config.seed + 7919)
        rec = EpochRecord(epoch, max_len, obj_sum / max(n_sent, 1), ppl, n_sent, skipped)
        history.append(rec)
        log.info("epoch %d max_len %d train_obj %.4f valid_ppl %.4f", epoch, max_len, rec.train_objective, ppl)
        if best_blob is None or ppl < best_ppl:
            best_ppl, best_epoch = ppl, epoch
            best_blob = model.to_bytes({**meta, "epoch": epoch, "valid_perplexity": ppl})

    if best_blob is None:
        raise TrainingAborted("no epoch had any training data")
    best_model, _ = PCFGModel.from_bytes(best_blob)
    result = TrainResult(best_model, best_epoch, best_ppl, history, visited, best_blob)
    if config.checkpoint_path:
        Path(config.checkpoint_path).write_bytes(best_blob)
    if config.log_path:
        Path(config.log_path).write_text(result.log_text(), encoding="utf-8")
    return result
