import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from grammar_induction.corpus import (UNK, BracketError, RawTree, Vocab, binarize_right, canonical_whitespace,
                                      format_gold_spans, gold_spans, parse_bracketed, parse_gold_spans,
                                      preprocess, process_tree, read_bracketed, strip_function_tags)

DOG = "(S (NP (DT the) (NN dog)) (VP (VB ran)))"


def test_read_three_leaf_tree():
    (t,) = parse_bracketed(DOG)
    assert t.words() == ["the", "dog", "ran"] and t.tags() == ["DT", "NN", "VB"]
    assert gold_spans(t) == [(0, 2, "S"), (0, 1, "NP"), (2, 2, "VP")]


def test_unary_chain_preserved():
    (t,) = parse_bracketed("(S (VP (VB run)))")
    assert str(t) == "(S (VP (VB run)))"
    assert gold_spans(t) == [(0, 0, "S"), (0, 0, "VP")]


def test_round_trip_is_canonical_whitespace(tmp_path):
    text = "( (S\n    (NP-SBJ (DT The)   (NN cat))\n    (VP (VBD sat) ) ) )\n(X (Y z))"
    path = tmp_path / "t.mrg"
    path.write_text(text, encoding="utf-8")
    trees = read_bracketed(path)
    assert len(trees) == 2
    canon = canonical_whitespace(text)
    assert " ".join(str(t) for t in trees) == canon


@pytest.mark.parametrize("text,line", [("(S (NP", 1), ("(S (NP (DT a)))\n(S (NP (DT a))", 2), ("(S x))", 1), ("()", 1)])
def test_bracket_errors(text, line):
    with pytest.raises(BracketError) as e:
        parse_bracketed(text)
    assert e.value.line == line
    assert "line" in str(e.value) and "offset" in str(e.value)


def test_unclosed_reports_offset():
    with pytest.raises(BracketError) as e:
        parse_bracketed("  (S (NP")
    assert e.value.offset == 5  # position of the innermost unclosed "("


def test_punctuation_removed_and_spans_shifted():
    (t,) = parse_bracketed("(S (NP (NNP John)) (, ,) (VP (VBD Left)))")
    vocab, (ex,) = preprocess([t], vocab_cap=10)
    assert ex.tokens == ["john", "left"]
    assert ex.gold_spans == [(0, 1, "S"), (0, 0, "NP"), (1, 1, "VP")]
    assert "," not in vocab


def test_lowercasing():
    (t,) = parse_bracketed("(S (NN The) (NN Dog))")
    assert process_tree(t, None).tokens == ["the", "dog"]


def test_vocab_cap_by_frequency():
    trees = parse_bracketed("(S (X a) (X a) (X a) (X b)) (S (X b) (X c))")
    vocab, exs = preprocess(trees, vocab_cap=2)
    assert vocab.itos == [UNK, "a", "b"]
    assert exs[1].ids == [2, 0]


def test_vocab_ties_lexicographic_and_deterministic():
    sents = [["b", "a", "c"], ["c", "a", "b"]]
    v1, v2 = Vocab.build(sents, 2), Vocab.build(list(reversed(sents)), 2)
    assert v1.itos == [UNK, "a", "b"]
    assert v1.to_text().encode() == v2.to_text().encode()
    assert Vocab.from_text(v1.to_text()).itos == v1.itos


def test_short_and_all_punctuation_dropped(caplog):
    trees = parse_bracketed("(S (. .)) (S (NN word) (. .)) (S (NN a) (NN b))")
    with caplog.at_level(logging.WARNING):
        _, exs = preprocess(trees)
    assert [ex.tokens for ex in exs] == [["a", "b"]]
    assert "no non-punctuation" in caplog.text


def test_validation_split_uses_training_vocab():
    train = parse_bracketed("(S (NN a) (NN b))")
    valid = parse_bracketed("(S (NN a) (NN z))")
    vocab, _ = preprocess(train)
    _, (ex,) = preprocess(valid, vocab=vocab)
    assert ex.ids == [vocab.id("a"), 0]


def test_function_tags_and_empty_elements():
    assert strip_function_tags("NP-SBJ-1") == "NP" and strip_function_tags("PP=2") == "PP"
    assert strip_function_tags("-NONE-") == "-NONE-"
    (t,) = parse_bracketed("(S (NP-SBJ (-NONE- *T*)) (VP (VB go) (NP (NN home))))")
    ex = process_tree(t, None)
    assert ex.tokens == ["go", "home"]
    assert ex.gold_spans == [(0, 1, "S"), (0, 1, "VP"), (1, 1, "NP")]


def test_unary_duplicates_retained():
    (t,) = parse_bracketed("(S (NP (NP (DT a) (NN b))) (VP (VB c)))")
    spans = gold_spans(t)
    assert (0, 1, "NP") in spans and spans.count((0, 1, "NP")) == 2
    assert (2, 2, "VP") in spans


def test_binarize_already_binary_unchanged():
    (t,) = parse_bracketed(DOG.replace("(VP (VB ran))", "(VP (VB ran) (RB away))"))
    assert str(binarize_right(t)) == str(t)


def test_binarize_three_children():
    (t,) = parse_bracketed("(S (NP (DT a)) (VP (VB b)) (PP (IN c)))")
    b = binarize_right(t)
    assert {(i, j) for i, j, _ in gold_spans(b)} == {(0, 2), (1, 2)}
    assert b.words() == t.words()


def test_gold_span_file_round_trip():
    _, exs = preprocess(parse_bracketed(DOG + " (S (NN x) (NN y))"))
    text = format_gold_spans(exs)
    assert text.splitlines()[0] == "0 0:2:S 0:1:NP 2:2:VP"
    assert parse_gold_spans(text) == [ex.gold_spans for ex in exs]


# ----------------------------------------------------------- properties


LABELS = ["S", "NP", "VP", "PP"]
TAGS = ["NN", "VB", "DT", ",", "."]


@st.composite
def raw_trees(draw, depth=4):
    if depth == 0 or draw(st.booleans()) and depth < 4:
        return RawTree(draw(st.sampled_from(TAGS)), [draw(st.sampled_from(["a", "B", "c", "d"]))])
    kids = draw(st.lists(raw_trees(depth=depth - 1), min_size=1, max_size=4))
    return RawTree(draw(st.sampled_from(LABELS)), kids)


def _nested(spans):
    for a in spans:
        for b in spans:
            if not (a[1] < b[0] or b[1] < a[0] or (a[0] <= b[0] and b[1] <= a[1]) or (b[0] <= a[0] and a[1] <= b[1])):
                return False
    return True


def _is_binary(t):
    if t.is_preterminal:
        return True
    return len(t.children) == 2 and all(_is_binary(c) for c in t.children)


@given(raw_trees())
def test_binarization_preserves_yield(tree):
    b = binarize_right(tree)
    assert b.words() == tree.words()
    assert _is_binary(b) or b.is_preterminal


@given(raw_trees())
def test_spans_valid_after_punctuation_removal(tree):
    ex = process_tree(tree, None)
    if ex is None:
        assert all(t in (",", ".") for t in tree.tags())
        return
    n = len(ex.tokens)
    assert all(0 <= i <= j < n for i, j, _ in ex.gold_spans)
    assert _nested([(i, j) for i, j, _ in ex.gold_spans])


@given(st.lists(raw_trees(), min_size=1, max_size=5))
def test_preprocess_idempotent(trees):
    vocab, exs = preprocess(trees)
    _, again = preprocess([ex.tree for ex in exs], vocab=vocab)
    assert [ex.tokens for ex in again] == [ex.tokens for ex in exs]
    assert [ex.gold_spans for ex in again] == [ex.gold_spans for ex in exs]


@given(raw_trees())
def test_serialization_round_trip(tree):
    (again,) = parse_bracketed(str(tree))
    assert again == tree
