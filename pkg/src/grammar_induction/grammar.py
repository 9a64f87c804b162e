"""Symbol inventory and rule log-probabilities for the three parameterizations.

Symbols are indexed with nonterminals first (0..N-1) followed by preterminals
(N..N+P-1).  A binary rule A -> B C is stored at column ``B * (N+P) + C`` of
row A of the binary table.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Iterator

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor

KINDS = ("scalar", "neural", "compound")


@dataclass(frozen=True)
class GrammarSpec:
    num_nonterminals: int = 30
    num_preterminals: int = 60
    vocab_size: int = 10000
    symbol_dim: int = 256
    z_dim: int = 0

    def __post_init__(self):
        for name in ("num_nonterminals", "num_preterminals", "vocab_size", "symbol_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"GrammarSpec.{name} must be >= 1")
        if self.z_dim < 0:
            raise ValueError("GrammarSpec.z_dim must be >= 0")

    @property
    def num_symbols(self) -> int:
        return self.num_nonterminals + self.num_preterminals

    @property
    def num_child_pairs(self) -> int:
        return self.num_symbols ** 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RuleLogProbs:
    """Log rule probabilities, optionally with a leading batch dimension.

    root: (..., N); binary: (..., N, (N+P)**2); terminal: (..., P, V).
    """

    root: Tensor
    binary: Tensor
    terminal: Tensor

    @property
    def num_nonterminals(self) -> int:
        return self.root.shape[-1]

    @property
    def num_preterminals(self) -> int:
        return self.terminal.shape[-2]

    @property
    def vocab_size(self) -> int:
        return self.terminal.shape[-1]

    @property
    def batched(self) -> bool:
        return self.root.ndim == 2

    def numpy(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.root.data, self.binary.data, self.terminal.data

    def select(self, b: int) -> "RuleLogProbs":
        """The b-th grammar of a batched table (off-tape view)."""
        return RuleLogProbs(Tensor(self.root.data[b]), Tensor(self.binary.data[b]), Tensor(self.terminal.data[b]))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in (self.root, self.binary, self.terminal))

    def max_normalization_error(self) -> float:
        errs = [np.max(np.abs(dm._lse(t.data, -1, keepdims=False))) for t in (self.root, self.binary, self.terminal)]
        return float(np.max(errs))


# -------------------------------------------------------------- parameters


@dataclass
class ResidualMLP:
    """f(x) = g_1(g_2(W x + b)) with g(y) = relu(V relu(U y + p) + q) + y.

    ``blocks`` are listed in application order, i.e. blocks[0] is g_2.
    """

    W: Tensor
    b: Tensor
    blocks: list[tuple[Tensor, Tensor, Tensor, Tensor]]  # (U, p, V, q)

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]


def residual_mlp_forward(mlp: ResidualMLP, x) -> Tensor:
    x = dm.as_tensor(x)
    if x.shape[-1] != mlp.in_dim:
        raise dm.ShapeError("residual_mlp_forward", x.shape, mlp.W.shape)
    y = dm.affine(x, mlp.W, mlp.b)
    for U, p, V, q in mlp.blocks:
        h = dm.relu(dm.affine(y, U, p))
        y = dm.add(dm.relu(dm.affine(h, V, q)), y)
    return y


class GrammarParams:
    """Named parameter tensors for one grammar parameterization."""

    def __init__(self, spec: GrammarSpec, kind: str, tensors: dict[str, Tensor]):
        if kind not in KINDS:
            raise ValueError(f"unknown grammar kind {kind!r}")
        if kind == "compound" and spec.z_dim < 1:
            raise ValueError("compound grammar needs z_dim > 0")
        if kind != "compound" and spec.z_dim != 0:
            raise ValueError(f"{kind} grammar needs z_dim == 0")
        self.spec = spec
        self.kind = kind
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.tensors.items()

    def mlp(self, prefix: str) -> ResidualMLP:
        t = self.tensors
        blocks = [tuple(t[f"{prefix}.res{j}.{n}"] for n in "UpVq") for j in range(2)]
        return ResidualMLP(t[f"{prefix}.W"], t[f"{prefix}.b"], blocks)

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    @classmethod
    def initialize(cls, spec: GrammarSpec, kind: str, rng: np.random.Generator) -> "GrammarParams":
        """Xavier-uniform matrices, zero biases."""
        N, P, V, D, Z = (spec.num_nonterminals, spec.num_preterminals, spec.vocab_size,
                         spec.symbol_dim, spec.z_dim)
        M = spec.num_child_pairs
        shapes: dict[str, tuple] = {}
        if kind == "scalar":
            shapes = {"root_scores": (N,), "binary_scores": (N, M), "terminal_scores": (P, V)}
            tensors = {k: dm.parameter(dm.xavier_uniform_init(s, rng), k) for k, s in shapes.items()}
            return cls(spec, kind, tensors)
        shapes["symbol_emb"] = (1 + N + P, D)
        for f in ("f1", "f2"):
            shapes[f"{f}.W"] = (D, D + Z)
            shapes[f"{f}.b"] = (D,)
            for j in range(2):
                shapes.update({f"{f}.res{j}.U": (D, D), f"{f}.res{j}.p": (D,),
                               f"{f}.res{j}.V": (D, D), f"{f}.res{j}.q": (D,)})
        shapes.update({
            "root_out": (N, D), "root_bias": (N,),
            "binary_out": (M, D + Z), "binary_bias": (M,),
            "terminal_out": (V, D), "terminal_bias": (V,),
        })
        tensors = {}
        for name, shape in shapes.items():
            data = dm.xavier_uniform_init(shape, rng) if len(shape) > 1 else np.zeros(shape)
            tensors[name] = dm.parameter(data, name)
        return cls(spec, kind, tensors)


# -------------------------------------------------------------- rule tables


def _check_finite(params: GrammarParams) -> None:
    for name, t in params.named_tensors():
        if not np.all(np.isfinite(t.data)):
            raise ValueError(f"non-finite values in grammar parameter {name!r}")


def scalar_rule_logprobs(tables) -> RuleLogProbs:
    """Normalize raw score tables (root, binary, terminal) row-wise.

    ``tables`` is a GrammarParams of kind "scalar" or a (root, binary, terminal) triple.
    """
    if isinstance(tables, GrammarParams):
        tables = (tables["root_scores"], tables["binary_scores"], tables["terminal_scores"])
    root, binary, terminal = (dm.as_tensor(t) for t in tables)
    N = root.shape[-1]
    P = terminal.shape[-2] if terminal.ndim >= 2 else -1
    if root.ndim != 1 or terminal.ndim != 2 or binary.shape != (N, (N + P) ** 2):
        raise dm.ShapeError("scalar_rule_logprobs", root.shape, binary.shape, terminal.shape)
    return RuleLogProbs(dm.log_softmax(root), dm.log_softmax(binary), dm.log_softmax(terminal))


def _network_rule_logprobs(params: GrammarParams, z: Tensor | None) -> RuleLogProbs:
    spec = params.spec
    N, P = spec.num_nonterminals, spec.num_preterminals
    emb = params["symbol_emb"]
    w_root = dm.index(emb, slice(0, 1))          # (1, D)
    w_nt = dm.index(emb, slice(1, 1 + N))        # (N, D)
    w_pt = dm.index(emb, slice(1 + N, 1 + N + P))  # (P, D)
    f1, f2 = params.mlp("f1"), params.mlp("f2")

    if z is None:
        root_in, nt_in, pt_in = w_root, w_nt, w_pt
    else:
        B, Z = z.shape
        root_in = dm.concat([dm.broadcast_to(w_root, (B, w_root.shape[1])), z], axis=-1)
        zb_n = dm.broadcast_to(dm.reshape(z, (B, 1, Z)), (B, N, Z))
        zb_p = dm.broadcast_to(dm.reshape(z, (B, 1, Z)), (B, P, Z))
        nt_in = dm.concat([dm.broadcast_to(w_nt, (B,) + w_nt.shape), zb_n], axis=-1)
        pt_in = dm.concat([dm.broadcast_to(w_pt, (B,) + w_pt.shape), zb_p], axis=-1)

    root_scores = dm.affine(residual_mlp_forward(f1, root_in), params["root_out"], params["root_bias"])
    binary_scores = dm.affine(nt_in, params["binary_out"], params["binary_bias"])
    term_scores = dm.affine(residual_mlp_forward(f2, pt_in), params["terminal_out"], params["terminal_bias"])
    if z is None:
        root_scores = dm.reshape(root_scores, (N,))
    return RuleLogProbs(dm.log_softmax(root_scores), dm.log_softmax(binary_scores), dm.log_softmax(term_scores))


def neural_rule_logprobs(params: GrammarParams) -> RuleLogProbs:
    if params.kind != "neural" or params.spec.z_dim != 0:
        raise ValueError("neural_rule_logprobs requires a neural grammar with z_dim == 0")
    _check_finite(params)
    return _network_rule_logprobs(params, None)


def compound_rule_logprobs(params: GrammarParams, z) -> RuleLogProbs:
    """Per-sentence rule tables given latent z of shape (z_dim,) or (B, z_dim)."""
    if params.kind != "compound":
        raise ValueError("compound_rule_logprobs requires a compound grammar")
    z = dm.as_tensor(z)
    Z = params.spec.z_dim
    if z.shape[-1] != Z or z.ndim not in (1, 2):
        raise dm.ShapeError("compound_rule_logprobs (z)", z.shape, (Z,))
    _check_finite(params)
    single = z.ndim == 1
    rules = _network_rule_logprobs(params, dm.reshape(z, (1, Z)) if single else z)
    if single:
        N = params.spec.num_nonterminals
        rules = RuleLogProbs(dm.reshape(rules.root, (N,)),
                             dm.reshape(rules.binary, rules.binary.shape[1:]),
                             dm.reshape(rules.terminal, rules.terminal.shape[1:]))
    return rules


def rule_logprobs(params: GrammarParams, z=None) -> RuleLogProbs:
    if params.kind == "scalar":
        return scalar_rule_logprobs(params)
    if params.kind == "neural":
        return neural_rule_logprobs(params)
    if z is None:
        raise ValueError("compound grammar needs a latent vector")
    return compound_rule_logprobs(params, z)
