"""Model bundle (grammar + optional inference network) and the checkpoint file format.

Checkpoint layout (all integers little-endian)::

    offset 0   8 bytes   magic b"GRINDCK1"
    offset 8   8 bytes   uint64 header length H
    offset 16  H bytes   UTF-8 JSON header, keys sorted, no whitespace
    offset 16+H          tensor payload: float64 little-endian, row-major,
                         tensors in header order

The header holds ``{"meta": {...}, "tensors": [{"name", "shape", "offset"}]}``
where ``offset`` counts bytes from the start of the payload.  ``meta`` carries
the model kind, GrammarSpec, encoder dims, RNG seed and any caller metadata.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from . import diffmath as dm
from .chart import Tree, inside_batch, viterbi_parse
from .diffmath import Tensor
from .grammar import GrammarParams, GrammarSpec, RuleLogProbs, rule_logprobs
from .posterior import (EncoderParams, GaussianPosterior, encode_batch, kl_to_standard_normal,
                        sample)

MAGIC = b"GRINDCK1"


class PCFGModel:
    def __init__(self, grammar: GrammarParams, encoder: EncoderParams | None = None):
        if grammar.kind == "compound" and encoder is None:
            raise ValueError("compound model needs an encoder")
        self.grammar = grammar
        self.encoder = encoder

    @property
    def kind(self) -> str:
        return self.grammar.kind

    @property
    def spec(self) -> GrammarSpec:
        return self.grammar.spec

    @classmethod
    def initialize(cls, kind: str, spec: GrammarSpec, rng: np.random.Generator,
                   encoder_embed_dim: int | None = None, encoder_hidden: int = 512) -> "PCFGModel":
        grammar = GrammarParams.initialize(spec, kind, rng)
        encoder = None
        if kind == "compound":
            encoder = EncoderParams.initialize(spec.vocab_size, encoder_embed_dim or spec.symbol_dim,
                                               encoder_hidden, spec.z_dim, rng)
        return cls(grammar, encoder)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name, t in self.grammar.named_tensors():
            yield f"grammar.{name}", t
        if self.encoder is not None:
            for name, t in self.encoder.named_tensors():
                yield f"encoder.{name}", t

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    # -- objectives -------------------------------------------------------

    def rules(self, z=None) -> RuleLogProbs:
        return rule_logprobs(self.grammar, z)

    def log_likelihood(self, words) -> Tensor:
        """Exact log p(x) per sentence (scalar/neural), shape (B,)."""
        if self.kind == "compound":
            raise ValueError("exact likelihood is intractable for the compound model")
        return inside_batch(words, self.rules())

    def posterior(self, words) -> GaussianPosterior:
        if self.encoder is None:
            raise ValueError(f"{self.kind} model has no inference network")
        return encode_batch(words, self.encoder)

    def elbo(self, words, noise) -> Tensor:
        """Single-sample ELBO per sentence, shape (B,)."""
        post = self.posterior(words)
        z = sample(post, np.asarray(noise).reshape(post.mean.shape))
        return dm.sub(inside_batch(words, self.rules(z)), kl_to_standard_normal(post))

    def objective(self, words, rng: np.random.Generator | None = None) -> Tensor:
        words = np.atleast_2d(words)
        if self.kind == "compound":
            noise = rng.standard_normal((words.shape[0], self.spec.z_dim))
            return self.elbo(words, noise)
        return self.log_likelihood(words)

    # -- decoding ---------------------------------------------------------

    def posterior_mean(self, words) -> np.ndarray:
        return self.posterior(np.atleast_2d(words)).mean.data.copy()

    def parse(self, words) -> Tree:
        words = np.asarray(words, dtype=np.int64)
        if self.kind == "compound":
            mean = self.posterior_mean(words)[0]
            return viterbi_parse(words, self.rules(mean))
        return viterbi_parse(words, self.rules())

    # -- serialization ----------------------------------------------------

    def to_bytes(self, meta: dict | None = None) -> bytes:
        meta = dict(meta or {})
        meta.update(kind=self.kind, grammar_spec=self.spec.to_dict())
        if self.encoder is not None:
            meta.update(encoder_hidden=self.encoder.hidden_dim,
                        encoder_embed_dim=self.encoder["emb"].shape[1])
        entries, payload, offset = [], [], 0
        for name, t in self.named_parameters():
            arr = np.ascontiguousarray(t.data, dtype="<f8")
            entries.append({"name": name, "offset": offset, "shape": list(arr.shape)})
            payload.append(arr.tobytes(order="C"))
            offset += arr.nbytes
        header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True,
                            separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(payload)

    @classmethod
    def from_bytes(cls, blob: bytes) -> tuple["PCFGModel", dict]:
        if blob[:8] != MAGIC:
            raise ValueError("not a grammar checkpoint (bad magic)")
        (hlen,) = struct.unpack("<Q", blob[8:16])
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
        base = 16 + hlen
        meta = header["meta"]
        arrays = {}
        for e in header["tensors"]:
            count = int(np.prod(e["shape"])) if e["shape"] else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=base + e["offset"])
            arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
        spec = GrammarSpec(**meta["grammar_spec"])
        gt = {k[len("grammar."):]: dm.parameter(v, k[len("grammar."):]) for k, v in arrays.items()
              if k.startswith("grammar.")}
        et = {k[len("encoder."):]: dm.parameter(v, k) for k, v in arrays.items() if k.startswith("encoder.")}
        model = cls(GrammarParams(spec, meta["kind"], gt), EncoderParams(et) if et else None)
        return model, meta

    def save(self, path, meta: dict | None = None) -> bytes:
        blob = self.to_bytes(meta)
        Path(path).write_bytes(blob)
        return blob

    @classmethod
    def load(cls, path) -> tuple["PCFGModel", dict]:
        return cls.from_bytes(Path(path).read_bytes())

    def copy(self) -> "PCFGModel":
        model, _ = PCFGModel.from_bytes(self.to_bytes())
        return model
