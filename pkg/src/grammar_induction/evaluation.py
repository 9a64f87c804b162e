"""Unsupervised-parsing metrics.

Span indices are inclusive (i, j).  Trivial spans, i.e. width-one spans and the
whole-sentence span, never contribute to any bracketing score.  F1 values are
percentages.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .chart import inside_batch
from .posterior import log_normal_density, log_standard_normal

VACUOUS_PERFECT = "perfect"
VACUOUS_SKIP = "skip"


def unlabeled(spans: Iterable) -> set[tuple[int, int]]:
    return {(s[0], s[1]) for s in spans}


def filter_trivial(spans: Iterable, length: int) -> set[tuple[int, int]]:
    return {(i, j) for i, j in unlabeled(spans) if j > i and not (i == 0 and j == length - 1)}


def _f1(tp: int, n_pred: int, n_gold: int) -> float:
    if tp == 0:
        return 0.0
    p, r = tp / n_pred, tp / n_gold
    return 100.0 * 2 * p * r / (p + r)


def sentence_f1(pred, gold, length: int, vacuous: str = VACUOUS_PERFECT) -> float | None:
    """F1 for one sentence.

    If both filtered sets are empty the result is 100 (``vacuous="perfect"``)
    or None (``vacuous="skip"``); empty gold with non-empty prediction is 0.
    """
    p, g = filter_trivial(pred, length), filter_trivial(gold, length)
    if not g:
        if not p:
            return 100.0 if vacuous == VACUOUS_PERFECT else None
        return 0.0
    return _f1(len(p & g), len(p), len(g))


@dataclass
class CorpusF1:
    """Associative accumulator of global true/false positives."""

    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, pred, gold, length: int) -> "CorpusF1":
        p, g = filter_trivial(pred, length), filter_trivial(gold, length)
        tp = len(p & g)
        self.tp += tp
        self.fp += len(p) - tp
        self.fn += len(g) - tp
        return self

    def merge(self, other: "CorpusF1") -> "CorpusF1":
        return CorpusF1(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @property
    def precision(self) -> float:
        return 100.0 * self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return 100.0 * self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        return _f1(self.tp, self.tp + self.fp, self.tp + self.fn)


def unlabeled_f1(pred, gold, mode: str = "sentence", sentence_len: int | None = None,
                 accumulator: CorpusF1 | None = None, vacuous: str = VACUOUS_PERFECT):
    """Sentence mode returns this sentence's F1; corpus mode returns the updated accumulator."""
    if sentence_len is None:
        sentence_len = max(j for _, j in unlabeled(list(pred) + list(gold))) + 1
    if mode == "sentence":
        return sentence_f1(pred, gold, sentence_len, vacuous)
    if mode == "corpus":
        return (accumulator if accumulator is not None else CorpusF1()).add(pred, gold, sentence_len)
    raise ValueError(f"unknown mode {mode!r}")


def corpus_scores(preds: Sequence, golds: Sequence, lengths: Sequence[int],
                  vacuous: str = VACUOUS_PERFECT) -> dict:
    if not (len(preds) == len(golds) == len(lengths)):
        raise ValueError("prediction/gold/length lists differ in length")
    acc = CorpusF1()
    sent = []
    for p, g, n in zip(preds, golds, lengths):
        acc.add(p, g, n)
        f = sentence_f1(p, g, n, vacuous)
        if f is not None:
            sent.append(f)
    return {
        "sentence_f1": float(np.mean(sent)) if sent else float("nan"),
        "corpus_f1": acc.f1,
        "corpus_precision": acc.precision,
        "corpus_recall": acc.recall,
        "num_sentences": len(preds),
        "num_scored_sentences": len(sent),
    }


# ------------------------------------------------------------ label recall


def label_recall(pred, gold_labeled, label: str, length: int) -> float | None:
    """Percent of non-trivial gold spans with ``label`` whose (i, j) is predicted; None if absent."""
    p = filter_trivial(pred, length)
    targets = {(i, j) for i, j, lab in gold_labeled if lab == label} & filter_trivial(gold_labeled, length)
    if not targets:
        return None
    return 100.0 * len(targets & p) / len(targets)


def label_recall_table(preds: Sequence, golds: Sequence, lengths: Sequence[int]) -> dict[str, float]:
    """Corpus-level recall per gold label; labels with no gold instances are absent."""
    hit: Counter = Counter()
    tot: Counter = Counter()
    for p, g, n in zip(preds, golds, lengths):
        ps = filter_trivial(p, n)
        seen = set()
        for i, j, lab in g:
            if (i, j, lab) in seen or j == i or (i == 0 and j == n - 1):
                continue
            seen.add((i, j, lab))
            tot[lab] += 1
            hit[lab] += (i, j) in ps
    return {lab: 100.0 * hit[lab] / tot[lab] for lab in sorted(tot)}


# ---------------------------------------------------------------- self-F1


def self_f1(runs: Sequence[Sequence], lengths: Sequence[int] | None = None) -> float:
    """Mean sentence-level F1 over all unordered pairs of runs."""
    if len(runs) < 2:
        raise ValueError("self_f1 needs at least two runs")
    n = len(runs[0])
    if any(len(r) != n for r in runs):
        raise ValueError("runs cover different numbers of sentences")
    if lengths is None:
        lengths = [max(j for run in runs for _, j in unlabeled(run[s])) + 1 for s in range(n)]
    scores = []
    for a, b in itertools.combinations(range(len(runs)), 2):
        scores.append(float(np.mean([sentence_f1(runs[a][s], runs[b][s], lengths[s]) for s in range(n)])))
    return float(np.mean(scores))


def num_run_pairs(k: int) -> int:
    return k * (k - 1) // 2


# ------------------------------------------------------- alignment tables


@dataclass
class AlignmentTable:
    labels: list[str]
    rows: dict[int, dict[str, float]]     # symbol -> label -> fraction of its correct spans
    frequency: dict[int, float]           # symbol -> share of all predicted spans (percent)
    precision: dict[int, float]           # symbol -> percent of its spans that are gold constituents

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["symbol"] + self.labels + ["Freq.", "Acc."])
        for sym in sorted(self.rows):
            w.writerow([f"NT-{sym:02d}"] + [f"{100 * self.rows[sym][lab]:.1f}" for lab in self.labels]
                       + [f"{self.frequency[sym]:.1f}", f"{self.precision[sym]:.1f}"])
        return buf.getvalue()


def alignment_table(preds: Sequence, golds: Sequence, lengths: Sequence[int],
                    label_set: Sequence[str], other: str = "Other") -> AlignmentTable:
    """Cross-tabulate induced symbols against gold labels on correctly predicted spans.

    ``preds`` hold (i, j, symbol) spans, ``golds`` (i, j, label) spans.  When
    a unary chain gives one span several gold labels, the outermost (first in
    pre-order) is used.
    """
    labels = list(label_set) + [other]
    counts: dict[int, Counter] = defaultdict(Counter)
    predicted: Counter = Counter()
    for p, g, n in zip(preds, golds, lengths):
        gold_label: dict[tuple[int, int], str] = {}
        for i, j, lab in g:
            gold_label.setdefault((i, j), lab)
        for i, j, sym in p:
            if j == i or (i == 0 and j == n - 1):
                continue
            predicted[sym] += 1
            lab = gold_label.get((i, j))
            if lab is not None:
                counts[sym][lab if lab in label_set else other] += 1
    total = sum(predicted.values())
    rows, freq, prec = {}, {}, {}
    for sym in sorted(predicted):
        freq[sym] = 100.0 * predicted[sym] / total
        correct = sum(counts[sym].values())
        prec[sym] = 100.0 * correct / predicted[sym]
        if correct:
            rows[sym] = {lab: counts[sym][lab] / correct for lab in labels}
    return AlignmentTable(labels, rows, freq, prec)


# ----------------------------------------------------------- many-to-one


def many_to_one(pred_tags: Sequence[Sequence], gold_tags: Sequence[Sequence[str]]) -> tuple[float, dict]:
    """Token accuracy after mapping each induced tag to its most frequent gold tag.

    Ties in the mapping go to the lexicographically smallest gold tag.
    """
    if len(pred_tags) != len(gold_tags):
        raise ValueError("different number of sentences")
    co: dict = defaultdict(Counter)
    total = 0
    for s, (p, g) in enumerate(zip(pred_tags, gold_tags)):
        if len(p) != len(g):
            raise ValueError(f"sentence {s}: {len(p)} induced tags vs {len(g)} gold tags")
        for a, b in zip(p, g):
            co[a][b] += 1
        total += len(p)
    mapping = {a: min(c.items(), key=lambda kv: (-kv[1], kv[0]))[0] for a, c in co.items()}
    correct = sum(c[mapping[a]] for a, c in co.items())
    return (100.0 * correct / total if total else float("nan")), mapping


# -------------------------------------------------------------- baselines


def baseline_trees(kind: str, sentence_len: int, rng: np.random.Generator | None = None) -> set[tuple[int, int]]:
    """Unlabeled spans of width >= 2 for left/right-branching or random binary trees.

    Random trees pick each split point uniformly, which is *not* uniform over
    tree shapes (for n=4 the two fully-branching shapes each get 1/6, the
    balanced shape 1/3).
    """
    n = sentence_len
    if n < 2:
        raise ValueError("sentence length must be >= 2")
    if kind == "left":
        return {(0, j) for j in range(1, n)}
    if kind == "right":
        return {(i, n - 1) for i in range(n - 1)}
    if kind == "random":
        if rng is None:
            raise ValueError("random baseline needs an rng")
        spans = set()

        def split(i, j):
            if j <= i:
                return
            spans.add((i, j))
            k = int(rng.integers(i, j))
            split(i, k)
            split(k + 1, j)

        split(0, n - 1)
        return spans
    raise ValueError(f"unknown baseline {kind!r}")


# --------------------------------------------------------- perplexity


def iw_log_marginal(model, words, num_samples: int, rng: np.random.Generator, chunk: int = 250) -> float:
    """Importance-weighted estimate of log p(x) for a compound model with q(z|x) as proposal."""
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    words = np.asarray(words, dtype=np.int64)
    post = model.posterior(words[None, :])
    mu, lv = post.mean.data[0], post.log_variance.data[0]
    logw = []
    for start in range(0, num_samples, chunk):
        k = min(chunk, num_samples - start)
        eps = rng.standard_normal((k, mu.shape[0]))
        z = mu + np.exp(0.5 * lv) * eps
        cond = inside_batch(np.repeat(words[None, :], k, axis=0), model.rules(z)).data
        logw.append(cond + log_standard_normal(z) - log_normal_density(z, mu, lv))
    logw = np.concatenate(logw)
    m = logw.max()
    return float(m + math.log(np.mean(np.exp(logw - m))))


def iw_perplexity(model, sentences: Sequence, num_samples: int = 1000,
                  rng: np.random.Generator | None = None) -> float:
    """exp(-sum log p(x) / tokens); IW estimate for compound models, exact otherwise."""
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    total, tokens = 0.0, 0
    sents = [np.asarray(getattr(s, "ids", s), dtype=np.int64) for s in sentences]
    if model.kind == "compound":
        if rng is None:
            raise ValueError("compound perplexity needs an rng")
        for s in sents:
            total += iw_log_marginal(model, s, num_samples, rng)
            tokens += len(s)
    else:
        rules = model.rules()
        for s in sents:
            total += float(inside_batch(s[None, :], rules).data[0])
            tokens += len(s)
    return math.exp(-total / tokens)


@dataclass
class EvalReport:
    sentence_f1: float
    corpus_f1: float
    label_recall: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    extra: dict[str, float] = field(default_factory=dict)

    def to_tsv(self) -> str:
        lines = ["metric\tvalue", f"sentence_f1\t{self.sentence_f1:.4f}", f"corpus_f1\t{self.corpus_f1:.4f}"]
        lines += [f"{k}\t{v:.4f}" for k, v in self.extra.items()]
        lines += [f"label_recall:{k}\t{v:.4f}" for k, v in self.label_recall.items()]
        lines += [f"{k}\t{v}" for k, v in self.counts.items()]
        return "\n".join(lines) + "\n"

    def to_keyvalue(self) -> str:
        items = {"sentence_f1": self.sentence_f1, "corpus_f1": self.corpus_f1, **self.extra}
        items.update({f"label_recall.{k}": v for k, v in self.label_recall.items()})
        items.update(self.counts)
        return "".join(f"{k}={v!r}\n" for k, v in items.items())
