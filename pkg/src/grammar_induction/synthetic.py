"""Sampling corpora from a known PCFG, plus the fixed recovery benchmark grammar."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chart import Tree, inside_logprob, tree_from_nested, viterbi_parse
from .diffmath import Tensor
from .evaluation import corpus_scores
from .grammar import RuleLogProbs
from .trainer import TrainConfig, train


def pcfg_from_probs(root: np.ndarray, binary: dict[tuple[int, int, int], float], terminal: np.ndarray,
                    floor: float = 1e-12) -> RuleLogProbs:
    """Build normalized log tables; rules absent from ``binary`` get mass ``floor``.

    ``binary`` maps (A, B, C) -> probability with symbols indexed nonterminals first.
    """
    N = len(root)
    P = terminal.shape[0]
    S = N + P
    bin_tab = np.full((N, S * S), floor)
    for (a, b, c), p in binary.items():
        bin_tab[a, b * S + c] = p
    tabs = []
    for t in (np.asarray(root, dtype=float) + floor, bin_tab, np.asarray(terminal, dtype=float) + floor):
        t = t / t.sum(axis=-1, keepdims=True)
        tabs.append(Tensor(np.log(t)))
    return RuleLogProbs(*tabs)


def sample_tree(rules: RuleLogProbs, rng: np.random.Generator, max_len: int = 40):
    """Draw (word ids, Tree) top-down; returns None when the yield exceeds max_len."""
    root, binary, term = (np.exp(t) for t in rules.numpy())
    N = rules.num_nonterminals
    S = N + rules.num_preterminals
    words: list[int] = []

    def expand(sym: int):
        if len(words) > max_len:
            raise OverflowError
        if sym >= N:
            t = sym - N
            w = int(rng.choice(term.shape[1], p=term[t]))
            i = len(words)
            words.append(w)
            return (i, t)
        bc = int(rng.choice(S * S, p=binary[sym]))
        b, c = divmod(bc, S)
        left = expand(b)
        right = expand(c)
        lo = left[0]
        hi = right[1] if len(right) == 5 else right[0]
        return (lo, hi, sym, left, right)

    try:
        top = expand(int(rng.choice(N, p=root)))
    except OverflowError:
        return None
    if len(words) > max_len:
        return None
    return np.asarray(words, dtype=np.int64), tree_from_nested(top, len(words))


def sample_corpus(rules: RuleLogProbs, n: int, rng: np.random.Generator, min_len: int = 2,
                  max_len: int = 40) -> list[tuple[np.ndarray, Tree]]:
    out = []
    while len(out) < n:
        draw = sample_tree(rules, rng, max_len)
        if draw is not None and min_len <= len(draw[0]) <= max_len:
            out.append(draw)
    return out


def benchmark_grammar() -> RuleLogProbs:
    """Two nonterminals, three preterminals, twenty words.

    Preterminals own disjoint word blocks: T0 (words 0-4, determiner-like),
    T1 (5-12, noun-like), T2 (13-19, verb-like).  Nonterminal 0 is a clause,
    nonterminal 1 a noun phrase.
    """
    N, P, V = 2, 3, 20
    S_, NP = 0, 1
    T0, T1, T2 = N + 0, N + 1, N + 2
    binary = {
        (S_, NP, S_): 0.25,   # NP clause
        (S_, T2, NP): 0.55,   # V NP
        (S_, NP, T2): 0.20,   # NP V
        (NP, T0, T1): 0.75,   # D N
        (NP, T0, NP): 0.25,   # D NP
    }
    terminal = np.zeros((P, V))
    rng = np.random.default_rng(20190527)
    for t, (lo, hi) in enumerate([(0, 5), (5, 13), (13, 20)]):
        weights = rng.uniform(0.5, 1.5, size=hi - lo)
        terminal[t, lo:hi] = weights / weights.sum()
    root = np.array([1.0, 0.0])
    return pcfg_from_probs(root, binary, terminal)


@dataclass
class RecoveryReport:
    nll_model: float
    nll_generator: float
    sentence_f1: float
    best_epoch: int
    checkpoint: bytes
    log: str

    @property
    def relative_nll_gap(self) -> float:
        return self.nll_model / self.nll_generator - 1.0

    def to_text(self) -> str:
        return (f"heldout_nll_per_token_model\t{self.nll_model!r}\n"
                f"heldout_nll_per_token_generator\t{self.nll_generator!r}\n"
                f"relative_nll_gap\t{self.relative_nll_gap!r}\n"
                f"sentence_f1\t{self.sentence_f1!r}\n"
                f"best_epoch\t{self.best_epoch}\n")


def run_recovery(seed: int = 3, data_seed: int = 1, num_sentences: int = 2000, epochs: int = 10,
                 symbol_dim: int = 32) -> RecoveryReport:
    """Sample from :func:`benchmark_grammar`, fit a neural PCFG of matching size, score held-out data.

    The corpus is split 80/10/10 into train/validation/held-out.
    """
    gen = benchmark_grammar()
    data = sample_corpus(gen, num_sentences, np.random.default_rng(data_seed))
    n_train, n_valid = int(0.8 * num_sentences), int(0.1 * num_sentences)
    train_d, valid_d, test_d = (data[:n_train], data[n_train:n_train + n_valid], data[n_train + n_valid:])
    cfg = TrainConfig(model="neural", epochs=epochs, seed=seed, num_nonterminals=gen.num_nonterminals,
                      num_preterminals=gen.num_preterminals, symbol_dim=symbol_dim)
    result = train(cfg, [w for w, _ in train_d], [w for w, _ in valid_d], vocab_size=gen.vocab_size)
    rules = result.model.rules()
    tokens = sum(len(w) for w, _ in test_d)
    nll_model = -sum(inside_logprob(w, rules).item() for w, _ in test_d) / tokens
    nll_gen = -sum(inside_logprob(w, gen).item() for w, _ in test_d) / tokens
    preds = [viterbi_parse(w, rules).unlabeled_spans() for w, _ in test_d]
    golds = [t.unlabeled_spans() for _, t in test_d]
    f1 = corpus_scores(preds, golds, [len(w) for w, _ in test_d])["sentence_f1"]
    return RecoveryReport(nll_model, nll_gen, f1, result.best_epoch, result.checkpoint, result.log_text())
