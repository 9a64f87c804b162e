"""Latent-space inspection: posterior-mean neighbors and subtree principal components."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .chart import Tree
from .corpus import RawTree, parse_bracketed

log = logging.getLogger(__name__)


def cosine_matrix(vectors: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity; any pair involving a zero vector has similarity 0."""
    norms = np.linalg.norm(vectors, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = vectors / safe[:, None]
    sim = unit @ unit.T
    zero = norms == 0
    sim[zero, :] = 0.0
    sim[:, zero] = 0.0
    return sim


def nearest_neighbors(means: np.ndarray, query_ids: Sequence[int], k: int) -> dict[int, list[tuple[int, float]]]:
    """k most cosine-similar sentences per query, excluding the query; ties by sentence id."""
    sim = cosine_matrix(np.asarray(means, dtype=float))
    out = {}
    for q in query_ids:
        if not 0 <= q < len(sim):
            raise IndexError(f"query id {q} out of range")
        cands = [(i, float(sim[q, i])) for i in range(len(sim)) if i != q]
        cands.sort(key=lambda t: (-t[1], t[0]))
        out[q] = cands[:k]
    return out


# ------------------------------------------------------------- subtrees


def unlexicalized(node) -> str:
    """Bracketing of a nested Tree node with words dropped, e.g. '(NT-04 (T-13) (T-02))'."""
    if len(node) == 2:
        return f"(T-{node[1]:02d})"
    return f"(NT-{node[2]:02d} {unlexicalized(node[3])} {unlexicalized(node[4])})"


def normalize_pattern(pattern: str) -> str:
    """Parse a bracketed pattern and drop any words, so '(T-13 ·)' and '(T-13)' agree."""
    trees = parse_bracketed(_fill_empty(pattern))
    if len(trees) != 1:
        raise ValueError("pattern must be a single bracketed tree")

    def fmt(t: RawTree) -> str:
        kids = [fmt(c) for c in t.children if isinstance(c, RawTree)]
        return "(" + t.label + "".join(" " + k for k in kids) + ")"

    return fmt(trees[0])


def _fill_empty(pattern: str) -> str:
    # "(T-13)" would otherwise be an empty tree for the reader
    return re.sub(r"\((T-\d+)\s*\)", r"(\1 ·)", pattern)


def subtrees(tree: Tree):
    """All internal nodes of a parse as (i, j, unlexicalized shape)."""
    out = []

    def walk(nd):
        if len(nd) == 2:
            return
        out.append((nd[0], nd[1], unlexicalized(nd)))
        walk(nd[3])
        walk(nd[4])

    walk(tree.nested())
    return out


@dataclass
class PCAResult:
    component: np.ndarray
    projections: np.ndarray
    explained_variance: float
    iterations: int
    degenerate: bool


class PCAError(RuntimeError):
    pass


def top_principal_component(vectors: np.ndarray, tol: float = 1e-8, max_iter: int = 1000) -> PCAResult:
    """Top component of the centered (unwhitened) data by power iteration.

    The component is oriented so its largest-magnitude loading is positive.
    """
    X = np.asarray(vectors, dtype=float)
    if X.shape[0] < 2:
        raise PCAError("need at least two vectors")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    if np.max(np.abs(Xc)) <= 1e-12 * max(1.0, float(np.max(np.abs(X)))):
        log.warning("all vectors identical; variance is zero")
        comp = np.zeros(X.shape[1])
        comp[0] = 1.0
        return PCAResult(comp, np.zeros(X.shape[0]), 0.0, 0, True)
    v = Xc[np.argmax(np.linalg.norm(Xc, axis=1))].copy()
    v /= np.linalg.norm(v)
    residual = np.inf
    for it in range(1, max_iter + 1):
        w = cov @ v
        lam = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0:
            raise PCAError("power iteration collapsed to zero")
        w /= nw
        if w @ v < 0:
            w = -w
        residual = float(np.linalg.norm(cov @ w - (w @ cov @ w) * w))
        v = w
        if residual < tol * max(abs(lam), 1.0):
            break
    else:
        raise PCAError(f"power iteration did not converge (residual {residual:.3e})")
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    return PCAResult(v, Xc @ v, float(v @ cov @ v), it, False)


@dataclass
class SubtreeReport:
    pattern: str
    matches: int
    pca: PCAResult
    negative: list[tuple[float, str]]
    positive: list[tuple[float, str]]

    def to_text(self) -> str:
        lines = [f"pattern\t{self.pattern}", f"matches\t{self.matches}",
                 f"explained_variance\t{self.pca.explained_variance:.6g}"]
        if self.pca.degenerate:
            lines.append("warning\tdegenerate variance (all mean vectors identical)")
        lines.append("# most negative projections")
        lines += [f"{v:.6f}\t{s}" for v, s in self.negative]
        lines.append("# most positive projections")
        lines += [f"{v:.6f}\t{s}" for v, s in self.positive]
        return "\n".join(lines) + "\n"


def subtree_pca(means: np.ndarray, trees: Sequence[Tree], words: Sequence[Sequence[str]],
                pattern: str, top_m: int = 5) -> SubtreeReport:
    """PCA over posterior means of sentences whose MAP parse contains ``pattern``.

    Every matching subtree contributes one (mean vector, constituent) pair.
    """
    target = normalize_pattern(pattern)
    vecs, constituents = [], []
    for mu, tree, ws in zip(means, trees, words):
        for i, j, shape in subtrees(tree):
            if shape == target:
                vecs.append(mu)
                constituents.append(" ".join(ws[i:j + 1]))
    if len(vecs) < 2:
        raise PCAError(f"pattern matched {len(vecs)} constituents; need at least 2")
    res = top_principal_component(np.asarray(vecs))
    order = np.argsort(res.projections, kind="stable")
    neg = [(float(res.projections[i]), constituents[i]) for i in order[:top_m]]
    pos = [(float(res.projections[i]), constituents[i]) for i in order[::-1][:top_m]]
    return SubtreeReport(target, len(vecs), res, neg, pos)
