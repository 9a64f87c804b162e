"""Amortized Gaussian posterior over the latent vector: BiLSTM encoder, sampling, KL."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor

LOGVAR_CLAMP = 10.0


@dataclass
class GaussianPosterior:
    mean: Tensor
    log_variance: Tensor

    @property
    def z_dim(self) -> int:
        return self.mean.shape[-1]


class EncoderParams:
    """Word embeddings, one bidirectional LSTM layer and the affine Gaussian head."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.tensors.items()

    @property
    def vocab_size(self) -> int:
        return self.tensors["emb"].shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.tensors["fwd.W_hh"].shape[1]

    @property
    def z_dim(self) -> int:
        return self.tensors["head.W"].shape[0] // 2

    @classmethod
    def initialize(cls, vocab_size: int, embed_dim: int, hidden_dim: int, z_dim: int,
                   rng: np.random.Generator) -> "EncoderParams":
        H = hidden_dim
        shapes = {"emb": (vocab_size, embed_dim)}
        for d in ("fwd", "bwd"):
            shapes.update({f"{d}.W_ih": (4 * H, embed_dim), f"{d}.W_hh": (4 * H, H), f"{d}.b": (4 * H,)})
        shapes.update({"head.W": (2 * z_dim, 2 * H), "head.b": (2 * z_dim,)})
        tensors = {}
        for name, shape in shapes.items():
            data = dm.xavier_uniform_init(shape, rng) if len(shape) > 1 else np.zeros(shape)
            tensors[name] = dm.parameter(data, f"encoder.{name}")
        return cls(tensors)


def _lstm(xs: list[Tensor], params: EncoderParams, direction: str) -> list[Tensor]:
    W_ih, W_hh, b = params[f"{direction}.W_ih"], params[f"{direction}.W_hh"], params[f"{direction}.b"]
    H = W_hh.shape[1]
    B = xs[0].shape[0]
    h = Tensor(np.zeros((B, H)))
    c = Tensor(np.zeros((B, H)))
    order = range(len(xs)) if direction == "fwd" else range(len(xs) - 1, -1, -1)
    out: list[Tensor | None] = [None] * len(xs)
    for t in order:
        gates = dm.add(dm.affine(xs[t], W_ih, b), dm.affine(h, W_hh))
        i = dm.sigmoid(dm.index(gates, (slice(None), slice(0, H))))
        f = dm.sigmoid(dm.index(gates, (slice(None), slice(H, 2 * H))))
        g = dm.tanh(dm.index(gates, (slice(None), slice(2 * H, 3 * H))))
        o = dm.sigmoid(dm.index(gates, (slice(None), slice(3 * H, 4 * H))))
        c = dm.add(dm.mul(f, c), dm.mul(i, g))
        h = dm.mul(o, dm.tanh(c))
        out[t] = h
    return out


def encode_batch(words, params: EncoderParams) -> GaussianPosterior:
    """Posteriors for B same-length sentences; mean and log-variance are (B, z_dim)."""
    words = np.atleast_2d(np.asarray(words, dtype=np.int64))
    if words.size and (words.min() < 0 or words.max() >= params.vocab_size):
        bad = int(words.max()) if words.max() >= params.vocab_size else int(words.min())
        raise ValueError(f"token id {bad} outside encoder vocabulary of size {params.vocab_size}")
    emb = dm.index(params["emb"], words)  # (B, n, E)
    n = words.shape[1]
    xs = [dm.index(emb, (slice(None), t)) for t in range(n)]
    fwd = _lstm(xs, params, "fwd")
    bwd = _lstm(xs, params, "bwd")
    states = dm.stack([dm.concat([f, b], axis=-1) for f, b in zip(fwd, bwd)], axis=1)  # (B, n, 2H)
    pooled = dm.max(states, axis=1)
    head = dm.affine(pooled, params["head.W"], params["head.b"])
    Z = params.z_dim
    mean = dm.index(head, (slice(None), slice(0, Z)))
    logvar = dm.clamp(dm.index(head, (slice(None), slice(Z, 2 * Z))), -LOGVAR_CLAMP, LOGVAR_CLAMP)
    return GaussianPosterior(mean, logvar)


def encode(sentence, params: EncoderParams) -> GaussianPosterior:
    words = np.asarray(getattr(sentence, "ids", sentence), dtype=np.int64)
    post = encode_batch(words[None, :], params)
    Z = params.z_dim
    return GaussianPosterior(dm.reshape(post.mean, (Z,)), dm.reshape(post.log_variance, (Z,)))


def sample(posterior: GaussianPosterior, noise) -> Tensor:
    """Reparameterized draw z = mean + exp(log_variance / 2) * noise."""
    noise = dm.as_tensor(noise)
    if noise.shape != posterior.mean.shape:
        raise dm.ShapeError("sample (noise)", noise.shape, posterior.mean.shape)
    std = dm.exp(dm.mul(posterior.log_variance, 0.5))
    return dm.add(posterior.mean, dm.mul(std, noise))


def kl_to_standard_normal(posterior: GaussianPosterior) -> Tensor:
    """KL[N(mean, diag(exp(log_variance))) || N(0, I)], summed over the last axis."""
    mu, lv = posterior.mean, posterior.log_variance
    terms = dm.sub(dm.add(dm.square(mu), dm.exp(lv)), dm.add(lv, 1.0))
    return dm.mul(dm.sum(terms, axis=-1), 0.5)


def log_normal_density(z: np.ndarray, mean: np.ndarray, log_variance: np.ndarray) -> np.ndarray:
    """Diagonal Gaussian log-density summed over the last axis."""
    var = np.exp(log_variance)
    return -0.5 * np.sum(np.log(2 * math.pi) + log_variance + (z - mean) ** 2 / var, axis=-1)


def log_standard_normal(z: np.ndarray) -> np.ndarray:
    return -0.5 * np.sum(np.log(2 * math.pi) + z ** 2, axis=-1)
