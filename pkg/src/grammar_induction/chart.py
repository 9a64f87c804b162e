"""Inside algorithm, Viterbi CKY decoding and an enumeration oracle.

All chart arithmetic is in log space.  The inside pass is built from tape
primitives, so gradients of the log-likelihood come from :func:`diffmath.backward`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator, Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .grammar import GrammarParams, RuleLogProbs, compound_rule_logprobs

NEG_INF = -np.inf
MAX_DERIVATIONS = 10**7


class ChartError(ValueError):
    pass


@dataclass(frozen=True)
class Sentence:
    ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.ids) < 2:
            raise ChartError(f"sentence length {len(self.ids)} < 2 cannot be derived by the grammar")
        if min(self.ids) < 0:
            raise ChartError("negative token id")

    def __len__(self) -> int:
        return len(self.ids)

    def array(self) -> np.ndarray:
        return np.asarray(self.ids, dtype=np.int64)


def as_sentence(x) -> Sentence:
    return x if isinstance(x, Sentence) else Sentence(tuple(int(i) for i in x))


def _check_inputs(words: np.ndarray, rules: RuleLogProbs) -> None:
    if words.shape[-1] < 2:
        raise ChartError(f"sentence length {words.shape[-1]} < 2 cannot be derived by the grammar")
    if words.size and words.max() >= rules.vocab_size:
        raise ChartError(f"token id {int(words.max())} outside vocabulary of size {rules.vocab_size}")
    if not rules.is_finite():
        raise ChartError("rule table contains non-finite entries")


# ------------------------------------------------------------------- inside


@lru_cache(maxsize=None)
def _split_indices(n: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices into the concatenation of widths 1..w-1 for left/right children.

    Width k occupies rows [off_k, off_k + n - k + 1); span (s, s+k-1) is row off_k + s.
    """
    offsets = np.concatenate([[0], np.cumsum([n - k + 1 for k in range(1, w)])])
    nspan = n - w + 1
    s = np.arange(nspan)[:, None]
    k = np.arange(1, w)[None, :]
    left = offsets[k - 1] + s
    right = offsets[w - k - 1] + s + k
    return left, right


def inside_batch(words, rules: RuleLogProbs) -> Tensor:
    """Log-likelihoods of B same-length sentences, shape (B,).

    ``rules`` is either one grammar shared by all sentences or a batch of B
    grammars (compound model).
    """
    words = np.atleast_2d(np.asarray(words, dtype=np.int64))
    _check_inputs(words, rules)
    B, n = words.shape
    N, P = rules.num_nonterminals, rules.num_preterminals
    S = N + P
    if rules.batched and rules.root.shape[0] != B:
        raise dm.ShapeError("inside_batch (rule batch)", rules.root.shape, words.shape)

    if rules.batched:
        leaf = dm.index(rules.terminal, (np.arange(B)[:, None, None], np.arange(P)[None, :, None], words[:, None, :]))
        binary = dm.reshape(rules.binary, (B, 1, N, S * S))
    else:
        leaf = dm.index(rules.terminal, (slice(None), words))  # (P, B, n)
        leaf = dm.transpose(leaf, (1, 0, 2))
        binary = dm.reshape(rules.binary, (1, 1, N, S * S))
    leaf = dm.transpose(leaf, (0, 2, 1))  # (B, n, P)

    beta = [None, dm.concat([np.full((B, n, N), NEG_INF), leaf], axis=-1)]
    for w in range(2, n + 1):
        nspan = n - w + 1
        left_idx, right_idx = _split_indices(n, w)
        prev = beta[1] if w == 2 else dm.concat(beta[1:w], axis=1)
        left = dm.reshape(dm.index(prev, (slice(None), left_idx)), (B, nspan, w - 1, S, 1))
        right = dm.reshape(dm.index(prev, (slice(None), right_idx)), (B, nspan, w - 1, 1, S))
        pairs = dm.reshape(dm.add(left, right), (B, nspan, w - 1, S * S))
        pairs = dm.reshape(dm.logsumexp(pairs, axis=2), (B, nspan, 1, S * S))
        inner = dm.logsumexp(dm.add(pairs, binary), axis=-1)  # (B, nspan, N)
        beta.append(dm.concat([inner, np.full((B, nspan, P), NEG_INF)], axis=-1))

    top = dm.index(beta[n], (slice(None), 0, slice(0, N)))  # (B, N)
    return dm.logsumexp(dm.add(top, rules.root), axis=-1)


def inside_logprob(sentence, rules: RuleLogProbs) -> Tensor:
    """log p(x) under ``rules`` as a scalar tensor (recorded on the active tape)."""
    words = as_sentence(sentence).array()
    if rules.batched:
        raise dm.ShapeError("inside_logprob (expects unbatched rules)", rules.root.shape)
    return dm.reshape(inside_batch(words[None, :], rules), ())


# ------------------------------------------------------------------- trees


@dataclass(frozen=True)
class Tree:
    """Binary parse as labeled spans in pre-order.

    Leaves are (i, i, preterminal index); internal nodes (i, j, nonterminal index).
    """

    length: int
    spans: tuple[tuple[int, int, int], ...]
    score: float | None = field(default=None, compare=False)

    def internal_spans(self) -> list[tuple[int, int, int]]:
        return [s for s in self.spans if s[0] != s[1]]

    def unlabeled_spans(self) -> set[tuple[int, int]]:
        return {(i, j) for i, j, _ in self.internal_spans()}

    def preterminals(self) -> list[int]:
        return [a for i, j, a in sorted(s for s in self.spans if s[0] == s[1])]

    def nested(self):
        """Nested tuples: leaf -> (i, T); node -> (i, j, A, left, right)."""
        it = iter(self.spans)

        def build():
            i, j, a = next(it)
            if i == j:
                return (i, a)
            left = build()
            right = build()
            return (i, j, a, left, right)

        return build()

    def to_bracketed(self, words: Sequence[str] | None = None) -> str:
        words = list(words) if words is not None else ["·"] * self.length

        def fmt(node):
            if len(node) == 2:
                return f"(T-{node[1]:02d} {words[node[0]]})"
            return f"(NT-{node[2]:02d} {fmt(node[3])} {fmt(node[4])})"

        return fmt(self.nested())


def tree_from_nested(node, length: int, score: float | None = None) -> Tree:
    spans: list[tuple[int, int, int]] = []

    def walk(nd):
        if len(nd) == 2:
            spans.append((nd[0], nd[0], nd[1]))
        else:
            spans.append((nd[0], nd[1], nd[2]))
            walk(nd[3])
            walk(nd[4])

    walk(node)
    return Tree(length, tuple(spans), score)


def _unbatched_arrays(rules: RuleLogProbs):
    root, binary, term = rules.numpy()
    if rules.batched:
        if root.shape[0] != 1:
            raise dm.ShapeError("viterbi (expects one grammar)", root.shape)
        root, binary, term = root[0], binary[0], term[0]
    S = rules.num_nonterminals + rules.num_preterminals
    return root, binary.reshape(binary.shape[0], S, S), term


def tree_logprob(tree: Tree, sentence, rules: RuleLogProbs) -> float:
    """log p(t) with the same association as the Viterbi recursion:
    score(node) = rule + (score(left) + score(right))."""
    words = as_sentence(sentence).ids
    root, binary, term = _unbatched_arrays(rules)
    N = rules.num_nonterminals

    def sym(nd):
        return N + nd[1] if len(nd) == 2 else nd[2]

    def score(nd):
        if len(nd) == 2:
            return term[nd[1], words[nd[0]]]
        left, right = nd[3], nd[4]
        return binary[nd[2], sym(left), sym(right)] + (score(left) + score(right))

    top = tree.nested()
    return float(root[top[2]] + score(top))


# ----------------------------------------------------------------- viterbi


def viterbi_parse(sentence, rules: RuleLogProbs) -> Tree:
    """Highest-scoring binary tree.

    Ties go to the smallest split point, then the smallest (B, C) pair in
    lexicographic order, then (at the root) the smallest nonterminal.
    """
    sent = as_sentence(sentence)
    words = sent.array()
    _check_inputs(words, rules)
    root, binary, term = _unbatched_arrays(rules)
    n = len(words)
    N, P = rules.num_nonterminals, rules.num_preterminals
    S = N + P
    best = np.full((n, n, S), NEG_INF)
    back = np.zeros((n, n, N), dtype=np.int64)  # flat index k*S*S + B*S + C, k relative split
    best[np.arange(n), np.arange(n), N:] = term[:, words].T
    for w in range(2, n + 1):
        for i in range(n - w + 1):
            j = i + w - 1
            left = best[i, i:j, :]            # (i, k) for k = i..j-1
            right = best[i + 1:j + 1, j, :]   # (k+1, j)
            pairs = left[:, :, None] + right[:, None, :]
            cand = (binary[:, None, :, :] + pairs[None]).reshape(N, -1)
            arg = np.argmax(cand, axis=1)
            best[i, j, :N] = cand[np.arange(N), arg]
            back[i, j] = arg
    top_scores = root + best[0, n - 1, :N]
    a = int(np.argmax(top_scores))

    def build(i, j, sym):
        if i == j:
            return (i, sym - N)
        k, bc = divmod(int(back[i, j, sym]), S * S)
        b, c = divmod(bc, S)
        split = i + k
        return (i, j, sym, build(i, split, b), build(split + 1, j, c))

    return tree_from_nested(build(0, n - 1, a), n, float(top_scores[a]))


def map_parse_compound(sentence, params: GrammarParams, posterior_mean) -> Tree:
    """MAP tree of the compound grammar with z fixed at the posterior mean."""
    mean = dm.as_tensor(posterior_mean)
    if mean.shape != (params.spec.z_dim,):
        raise dm.ShapeError("map_parse_compound (posterior mean)", mean.shape, (params.spec.z_dim,))
    return viterbi_parse(sentence, compound_rule_logprobs(params, mean))


# --------------------------------------------------------- enumeration oracle


def catalan(m: int) -> int:
    return math.comb(2 * m, m) // (m + 1)


def tree_shapes(i: int, j: int) -> Iterator:
    """All binary bracketings of tokens i..j: leaf -> i; node -> (i, j, left, right)."""
    if i == j:
        yield i
        return
    for k in range(i, j):
        for left in tree_shapes(i, k):
            for right in tree_shapes(k + 1, j):
                yield (i, j, left, right)


def num_derivations(n: int, N: int, P: int) -> int:
    return catalan(n - 1) * N ** (n - 1) * P ** n


def _derivation_blocks(sentence, rules: RuleLogProbs):
    """Yield (shape, internal_nodes, labels, scores) for every tree shape.

    ``labels`` has one row per symbol assignment: internal labels (pre-order)
    followed by leaf preterminals; ``scores`` are the derivation log-probabilities.
    """
    words = as_sentence(sentence).ids
    root, binary, term = _unbatched_arrays(rules)
    n = len(words)
    N, P = rules.num_nonterminals, rules.num_preterminals
    total = num_derivations(n, N, P)
    if total > MAX_DERIVATIONS:
        raise ChartError(f"enumeration bound exceeded: {total} derivations > {MAX_DERIVATIONS}")
    m = n - 1
    dims = (N,) * m + (P,) * n
    count = int(np.prod(dims))
    labels = np.stack(np.unravel_index(np.arange(count), dims), axis=1)
    for shape in tree_shapes(0, n - 1):
        internal: list = []

        def collect(nd):
            if isinstance(nd, tuple):
                internal.append(nd)
                collect(nd[2])
                collect(nd[3])

        collect(shape)
        pos = {id(nd): idx for idx, nd in enumerate(internal)}

        def sym(nd):
            return N + labels[:, m + nd] if not isinstance(nd, tuple) else labels[:, pos[id(nd)]]

        def score(nd):
            if not isinstance(nd, tuple):
                return term[labels[:, m + nd], words[nd]]
            return binary[labels[:, pos[id(nd)]], sym(nd[2]), sym(nd[3])] + (score(nd[2]) + score(nd[3]))

        scores = root[labels[:, 0]] + score(shape)
        yield shape, internal, labels, scores


def brute_force_logprob(sentence, rules: RuleLogProbs) -> float:
    """log of the explicit sum over every binary tree and symbol assignment."""
    chunks = [scores for *_, scores in _derivation_blocks(sentence, rules)]
    allscores = np.concatenate(chunks)
    return float(dm._lse(allscores, 0, keepdims=False))


def count_tree_shapes(n: int) -> int:
    return sum(1 for _ in tree_shapes(0, n - 1))


def brute_force_viterbi(sentence, rules: RuleLogProbs) -> tuple[float, list[Tree]]:
    """Maximum derivation score and every tree attaining it."""
    n = len(as_sentence(sentence))
    N = rules.num_nonterminals
    m = n - 1
    best = NEG_INF
    winners: list[Tree] = []
    for shape, internal, labels, scores in _derivation_blocks(sentence, rules):
        top = scores.max()
        if top < best:
            continue
        if top > best:
            best, winners = top, []
        pos = {id(nd): idx for idx, nd in enumerate(internal)}
        for row in np.flatnonzero(scores == top):
            lab = labels[row]

            def conv(nd):
                if not isinstance(nd, tuple):
                    return (nd, int(lab[m + nd]))
                return (nd[0], nd[1], int(lab[pos[id(nd)]]), conv(nd[2]), conv(nd[3]))

            winners.append(tree_from_nested(conv(shape), n, float(top)))
    return float(best), winners


def brute_force_expected_counts(sentence, rules: RuleLogProbs):
    """Posterior expected rule counts E_{p(t|x)}[count(r)] as arrays shaped like the rule tables."""
    words = as_sentence(sentence).ids
    N, P, V = rules.num_nonterminals, rules.num_preterminals, rules.vocab_size
    S = N + P
    m = len(words) - 1
    blocks = list(_derivation_blocks(sentence, rules))
    logz = dm._lse(np.concatenate([b[3] for b in blocks]), 0, keepdims=False)
    root_c = np.zeros(N)
    bin_c = np.zeros((N, S * S))
    term_c = np.zeros((P, V))
    for shape, internal, labels, scores in blocks:
        wts = np.exp(scores - logz)
        np.add.at(root_c, labels[:, 0], wts)
        pos = {id(nd): idx for idx, nd in enumerate(internal)}

        def sym(nd):
            return N + labels[:, m + nd] if not isinstance(nd, tuple) else labels[:, pos[id(nd)]]

        for nd in internal:
            np.add.at(bin_c, (labels[:, pos[id(nd)]], sym(nd[2]) * S + sym(nd[3])), wts)
        for i, w in enumerate(words):
            np.add.at(term_c, (labels[:, m + i], w), wts)
    return root_c, bin_c, term_c


def random_rules(rng: np.random.Generator, N: int, P: int, V: int, scale: float = 1.0) -> RuleLogProbs:
    """Random normalized rule tables (testing helper)."""
    S = N + P

    def norm(x):
        return x - dm._lse(x, -1)

    return RuleLogProbs(
        Tensor(norm(rng.normal(scale=scale, size=N))),
        Tensor(norm(rng.normal(scale=scale, size=(N, S * S)))),
        Tensor(norm(rng.normal(scale=scale, size=(P, V)))),
    )


__all__ = [
    "ChartError", "Sentence", "Tree", "inside_logprob", "inside_batch", "viterbi_parse",
    "map_parse_compound", "brute_force_logprob", "brute_force_viterbi", "brute_force_expected_counts",
    "tree_logprob", "tree_shapes", "catalan", "random_rules", "count_tree_shapes",
]
