"""Bracketed treebank reading, preprocessing and gold-span extraction."""
from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

log = logging.getLogger(__name__)

# Conventional PTB punctuation tags; configurable everywhere they are used.
DEFAULT_PUNCT_TAGS = frozenset({",", ".", ":", "``", "''", "-LRB-", "-RRB-", "-NONE-"})
UNK = "<unk>"


class BracketError(ValueError):
    def __init__(self, message: str, line: int, offset: int):
        self.line = line
        self.offset = offset
        super().__init__(f"line {line}, offset {offset}: {message}")


@dataclass
class RawTree:
    """Treebank node; a preterminal is a node whose only child is a word string."""

    label: str
    children: list[Union["RawTree", str]] = field(default_factory=list)

    @property
    def is_preterminal(self) -> bool:
        return len(self.children) == 1 and isinstance(self.children[0], str)

    def leaves(self) -> list[tuple[str, str]]:
        """(tag, word) pairs in order."""
        if self.is_preterminal:
            return [(self.label, self.children[0])]
        out = []
        for c in self.children:
            if isinstance(c, RawTree):
                out.extend(c.leaves())
        return out

    def words(self) -> list[str]:
        return [w for _, w in self.leaves()]

    def tags(self) -> list[str]:
        return [t for t, _ in self.leaves()]

    def __str__(self) -> str:
        parts = [c if isinstance(c, str) else str(c) for c in self.children]
        return "(" + self.label + "".join(" " + p for p in parts) + ")"


_TOKEN = re.compile(r"\(|\)|[^\s()]+")


def canonical_whitespace(text: str) -> str:
    """Whitespace normalization matched by ``str(RawTree)``."""
    text = re.sub(r"\s+", " ", text.strip())
    text = re.sub(r"\s+\)", ")", text)
    return re.sub(r"\(\s+(?=[^\s(])", "(", text)


def parse_bracketed(text: str) -> list[RawTree]:
    """Parse every top-level s-expression in ``text``."""
    line_starts = [0] + [m.end() for m in re.finditer("\n", text)]

    def where(pos):
        line = next(i for i in range(len(line_starts) - 1, -1, -1) if line_starts[i] <= pos)
        return line + 1, pos - line_starts[line]

    trees: list[RawTree] = []
    stack: list[tuple[RawTree, int]] = []
    expect_label = False
    for m in _TOKEN.finditer(text):
        tok = m.group()
        if tok == "(":
            node = RawTree("")
            stack.append((node, m.start()))
            expect_label = True
        elif tok == ")":
            if not stack:
                raise BracketError("unbalanced ')'", *where(m.start()))
            node, start = stack.pop()
            if not node.children:
                raise BracketError("empty tree", *where(start))
            if stack:
                stack[-1][0].children.append(node)
            else:
                trees.append(node)
            expect_label = False
        else:
            if not stack:
                raise BracketError(f"token {tok!r} outside brackets", *where(m.start()))
            node = stack[-1][0]
            if expect_label:
                node.label = tok
            else:
                node.children.append(tok)
            expect_label = False
    if stack:
        raise BracketError("unclosed '('", *where(stack[-1][1]))
    for t in trees:
        _validate(t)
    return trees


def _validate(tree: RawTree) -> None:
    for c in tree.children:
        if isinstance(c, str):
            if len(tree.children) != 1:
                raise ValueError(f"node {tree.label!r} mixes words and subtrees")
        else:
            _validate(c)


def read_bracketed(path) -> list[RawTree]:
    return parse_bracketed(Path(path).read_text(encoding="utf-8"))


def strip_function_tags(label: str) -> str:
    """NP-SBJ-1 -> NP, PP=2 -> PP; tags starting with '-' (e.g. -NONE-) are kept."""
    if not label or label.startswith("-"):
        return label
    return re.split(r"[-=]", label, maxsplit=1)[0] or label


def unwrap_root(tree: RawTree) -> RawTree:
    """Drop the unlabeled PTB wrapper ``( (S ...) )``."""
    while tree.label == "" and len(tree.children) == 1 and isinstance(tree.children[0], RawTree):
        tree = tree.children[0]
    return tree


def remove_leaves(tree: RawTree, drop_tags: Iterable[str], lowercase: bool = True) -> RawTree | None:
    """Copy without leaves tagged in ``drop_tags``; emptied constituents disappear."""
    drop = frozenset(drop_tags)

    def walk(node: RawTree) -> RawTree | None:
        if node.is_preterminal:
            if node.label in drop:
                return None
            word = node.children[0]
            return RawTree(node.label, [word.lower() if lowercase else word])
        kids = [k for k in (walk(c) for c in node.children if isinstance(c, RawTree)) if k is not None]
        return RawTree(strip_function_tags(node.label), kids) if kids else None

    return walk(unwrap_root(tree))


# -------------------------------------------------------------- vocabulary


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        if not tokens or tokens[0] != UNK:
            tokens = [UNK] + [t for t in tokens if t != UNK]
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    unk_id = 0

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, 0)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, 0) for t in tokens]

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]], cap: int) -> "Vocab":
        """Top-``cap`` tokens by frequency, ties broken lexicographically."""
        counts = Counter(t for s in sentences for t in s)
        counts.pop(UNK, None)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:cap]
        return cls([UNK] + [t for t, _ in ranked])

    def to_text(self) -> str:
        return "".join(t + "\n" for t in self.itos)

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        return cls([line for line in text.split("\n") if line])


# ---------------------------------------------------------------- examples


Span = tuple[int, int, str]


@dataclass
class ProcessedExample:
    ids: list[int]
    tokens: list[str]
    tags: list[str]
    gold_spans: list[Span]
    tree: RawTree

    def __len__(self) -> int:
        return len(self.tokens)


def gold_spans(tree: RawTree) -> list[Span]:
    """Every non-preterminal node as (i, j, label), inclusive indices, pre-order."""
    out: list[Span] = []

    def walk(node: RawTree, start: int) -> int:
        if node.is_preterminal:
            return start + 1
        pos = start
        slot = len(out)
        out.append((start, start, node.label))
        for c in node.children:
            if isinstance(c, RawTree):
                pos = walk(c, pos)
        out[slot] = (start, pos - 1, node.label)
        return pos

    walk(tree, 0)
    return out


def process_tree(tree: RawTree, vocab: Vocab | None, punct_tags=DEFAULT_PUNCT_TAGS,
                 lowercase: bool = True) -> ProcessedExample | None:
    clean = remove_leaves(tree, punct_tags, lowercase)
    if clean is None:
        return None
    tokens = clean.words()
    ids = vocab.encode(tokens) if vocab is not None else []
    return ProcessedExample(ids, tokens, clean.tags(), gold_spans(clean), clean)


def preprocess(trees: Sequence[RawTree], vocab_cap: int = 10000, punct_tags=DEFAULT_PUNCT_TAGS,
               vocab: Vocab | None = None, min_len: int = 2) -> tuple[Vocab, list[ProcessedExample]]:
    """Remove punctuation, lowercase, build the vocabulary (unless given) and map tokens to ids.

    Pass the training vocabulary when processing validation/test splits.
    """
    cleaned = []
    for n, t in enumerate(trees):
        ex = process_tree(t, None, punct_tags)
        if ex is None:
            log.warning("tree %d has no non-punctuation leaves; dropped", n)
            continue
        cleaned.append(ex)
    if vocab is None:
        vocab = Vocab.build((ex.tokens for ex in cleaned), vocab_cap)
    out = []
    for ex in cleaned:
        if len(ex.tokens) < min_len:
            continue
        ex.ids = vocab.encode(ex.tokens)
        out.append(ex)
    return vocab, out


def binarize_right(tree: RawTree) -> RawTree:
    """Strictly binary copy: unary chains collapse to their top label, and
    (X c1 c2 ... ck) becomes (X c1 (X| c2 (... ck)))."""
    if tree.is_preterminal:
        return RawTree(tree.label, list(tree.children))
    kids = [c for c in tree.children if isinstance(c, RawTree)]
    if len(kids) == 1:
        inner = binarize_right(kids[0])
        return inner if inner.is_preterminal else RawTree(tree.label, inner.children)
    kids = [binarize_right(c) for c in kids]
    node = kids[-1]
    for c in reversed(kids[1:-1]):
        node = RawTree(tree.label + "|", [c, node])
    return RawTree(tree.label, [kids[0], node])


# ------------------------------------------------------------------ writers


def format_corpus(examples: Sequence[ProcessedExample]) -> str:
    return "".join(" ".join(map(str, ex.ids)) + "\n" for ex in examples)


def format_gold_spans(examples: Sequence[ProcessedExample]) -> str:
    lines = []
    for n, ex in enumerate(examples):
        lines.append(" ".join([str(n)] + [f"{i}:{j}:{lab}" for i, j, lab in ex.gold_spans]))
    return "\n".join(lines) + "\n"


def parse_gold_spans(text: str) -> list[list[Span]]:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        _, *items = line.split()
        spans = []
        for it in items:
            i, j, lab = it.split(":", 2)
            spans.append((int(i), int(j), lab))
        out.append(spans)
    return out


def read_text_sentences(path) -> list[list[str]]:
    return [line.split() for line in Path(path).read_text(encoding="utf-8").splitlines()]
