"""Command-line entry points.

Exit codes: 0 success, 1 internal error, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, corpus, evaluation
from .chart import ChartError
from .model import PCFGModel
from .trainer import TrainConfig, train

log = logging.getLogger("grammar_induction")


class InputError(Exception):
    """Bad user input; maps to exit code 2."""


def _require(path: str | None, what: str) -> Path:
    if path is None:
        raise InputError(f"missing {what}")
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {path}")
    return p


def _punct_tags(arg: str | None):
    if arg is None:
        return corpus.DEFAULT_PUNCT_TAGS
    return frozenset(t for t in arg.split(",") if t)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_sentences(path: Path, fmt: str, punct_tags) -> list[list[str]]:
    """Token lists (lowercased, punctuation removed for treebank input)."""
    if fmt == "trees":
        out = []
        for t in corpus.read_bracketed(path):
            ex = corpus.process_tree(t, None, punct_tags)
            out.append(ex.tokens if ex is not None else [])
        return out
    return [[w.lower() for w in line] for line in corpus.read_text_sentences(path)]


def _load_model(path: str | None) -> tuple[PCFGModel, dict, corpus.Vocab]:
    p = _require(path, "checkpoint")
    try:
        model, meta = PCFGModel.load(p)
    except (ValueError, KeyError) as e:
        raise InputError(f"unreadable checkpoint {p}: {e}") from None
    return model, meta, corpus.Vocab(meta.get("vocab", [corpus.UNK]))


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# ------------------------------------------------------------------ commands


def cmd_preprocess(args) -> int:
    punct = _punct_tags(args.punct_tags)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_trees = corpus.read_bracketed(_require(args.train, "training treebank"))
    vocab, train_ex = corpus.preprocess(train_trees, args.vocab_cap, punct)
    (out / "vocab.txt").write_text(vocab.to_text(), encoding="utf-8")
    splits = {"train": train_ex}
    for name in ("valid", "test"):
        path = getattr(args, name)
        if path:
            _, splits[name] = corpus.preprocess(corpus.read_bracketed(_require(path, f"{name} treebank")),
                                                args.vocab_cap, punct, vocab=vocab)
    for name, exs in splits.items():
        (out / f"{name}.ids").write_text(corpus.format_corpus(exs), encoding="utf-8")
        (out / f"{name}.spans").write_text(corpus.format_gold_spans(exs), encoding="utf-8")
        (out / f"{name}.txt").write_text("".join(" ".join(ex.tokens) + "\n" for ex in exs), encoding="utf-8")
    return 0


def cmd_train(args) -> int:
    overrides = {"model": args.model, "seed": args.seed, "epochs": args.epochs}
    if args.config:
        cfg = TrainConfig.from_text(_require(args.config, "config file").read_text(encoding="utf-8"), **overrides)
    else:
        cfg = TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    train_path = _require(args.train, "training corpus")
    valid_path = _require(args.valid, "validation corpus")
    punct = _punct_tags(args.punct_tags)
    train_tok = [s for s in _load_sentences(train_path, args.input_format, punct) if len(s) >= 2]
    valid_tok = [s for s in _load_sentences(valid_path, args.input_format, punct) if len(s) >= 2]
    vocab = corpus.Vocab.build(train_tok, cfg.vocab_cap)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
    cfg = dataclasses.replace(cfg, checkpoint_path=str(ckpt), log_path=str(out / "train_log.tsv"))
    manifest = {
        "command_line": ["grammar-induction"] + list(args.argv),
        "config": dataclasses.asdict(cfg),
        "seed": cfg.seed,
        "checkpoint": str(ckpt),
        "corpus_sha256": {str(train_path): _sha256(train_path), str(valid_path): _sha256(valid_path)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    result = train(cfg, [vocab.encode(s) for s in train_tok], [vocab.encode(s) for s in valid_tok],
                   len(vocab), meta={"vocab": vocab.itos})
    print(f"best epoch {result.best_epoch}\tvalidation perplexity {result.best_perplexity:.4f}\t-> {ckpt}")
    return 0


def cmd_parse(args) -> int:
    model, _, vocab = _load_model(args.checkpoint)
    lines = corpus.read_text_sentences(_require(args.sentences, "sentence file"))
    out, oov, errors = [], 0, 0
    for n, toks in enumerate(lines):
        toks = [t.lower() for t in toks]
        if len(toks) < 2:
            errors += 1
            print(f"sentence {n}: error: length {len(toks)} < 2", file=sys.stderr)
            word = toks[0] if toks else "-EMPTY-"
            out.append(f"(ERROR (ERROR {word}))")
            continue
        ids = vocab.encode(toks)
        oov += sum(1 for t in toks if t not in vocab)
        tree = model.parse(np.asarray(ids))
        out.append(tree.to_bracketed(toks))
    if oov:
        log.warning("%d out-of-vocabulary tokens mapped to %s", oov, corpus.UNK)
    _write(args.out, "".join(line + "\n" for line in out))
    return 0


def _eval_inputs(pred_path: Path, gold_path: Path, punct):
    preds = corpus.read_bracketed(pred_path)
    golds = corpus.read_bracketed(gold_path)
    if len(preds) != len(golds):
        raise InputError(f"{len(preds)} predicted trees vs {len(golds)} gold trees "
                         f"(first divergent sentence id {min(len(preds), len(golds))})")
    rows = []
    for n, (p, g) in enumerate(zip(preds, golds)):
        gex = corpus.process_tree(g, None, punct)
        gtoks = gex.tokens if gex is not None else []
        pclean = corpus.remove_leaves(p, punct, lowercase=True)
        ptoks = pclean.words() if pclean is not None else []
        if ptoks != gtoks:
            raise InputError(f"sentence {n}: predicted yield {' '.join(ptoks)!r} != gold yield {' '.join(gtoks)!r}")
        if len(gtoks) < 2:
            continue
        rows.append((n, pclean, gex))
    return rows


def _symbol_id(label: str) -> int:
    try:
        return int(label.split("-", 1)[1])
    except (IndexError, ValueError):
        return -1


def cmd_eval(args) -> int:
    punct = _punct_tags(args.punct_tags)
    rows = _eval_inputs(_require(args.pred, "prediction file"), _require(args.gold, "gold file"), punct)
    lengths = [len(g.tokens) for _, _, g in rows]
    golds = [g.gold_spans for _, _, g in rows]
    preds = [corpus.gold_spans(p) for _, p, _ in rows]
    vac = evaluation.VACUOUS_SKIP if args.skip_vacuous else evaluation.VACUOUS_PERFECT
    scores = evaluation.corpus_scores(preds, golds, lengths, vac)
    report = evaluation.EvalReport(
        scores["sentence_f1"], scores["corpus_f1"],
        label_recall=evaluation.label_recall_table(preds, golds, lengths),
        counts={"num_sentences": scores["num_sentences"], "num_scored_sentences": scores["num_scored_sentences"]},
        extra={"corpus_precision": scores["corpus_precision"], "corpus_recall": scores["corpus_recall"]},
    )
    rng = np.random.default_rng(args.seed)
    for kind in [b for b in (args.baselines or "").split(",") if b]:
        base = [evaluation.baseline_trees(kind, n, rng) for n in lengths]
        s = evaluation.corpus_scores(base, golds, lengths, vac)
        report.extra[f"baseline_{kind}.sentence_f1"] = s["sentence_f1"]
        report.extra[f"baseline_{kind}.corpus_f1"] = s["corpus_f1"]
    if args.oracle:
        oracle = [corpus.gold_spans(corpus.binarize_right(g.tree)) for _, _, g in rows]
        s = evaluation.corpus_scores(oracle, golds, lengths, vac)
        report.extra["oracle.sentence_f1"] = s["sentence_f1"]
        report.extra["oracle.corpus_f1"] = s["corpus_f1"]
    headline = report.sentence_f1 if args.eval_mode == "sentence" else report.corpus_f1
    print(f"{args.eval_mode}_f1\t{headline:.4f}")
    if args.out:
        Path(args.out + ".tsv").write_text(report.to_tsv(), encoding="utf-8")
        Path(args.out + ".kv").write_text(report.to_keyvalue(), encoding="utf-8")
    else:
        sys.stdout.write(report.to_tsv())
    if args.align_labels:
        labels = [x for x in args.align_labels.split(",") if x]
        sym_preds = [[(i, j, _symbol_id(lab)) for i, j, lab in sp] for sp in preds]
        table = evaluation.alignment_table(sym_preds, golds, lengths, labels)
        _write(args.out + ".align.csv" if args.out else None, table.to_csv())
    return 0


def cmd_perplexity(args) -> int:
    model, _, vocab = _load_model(args.checkpoint)
    sents = [vocab.encode([w.lower() for w in s])
             for s in corpus.read_text_sentences(_require(args.corpus, "corpus")) if len(s) >= 2]
    ppl = evaluation.iw_perplexity(model, sents, args.iw_samples, np.random.default_rng(args.seed))
    _write(args.out, f"perplexity\t{ppl:.6f}\nsentences\t{len(sents)}\niw_samples\t{args.iw_samples}\n")
    return 0


def _compound_means(args):
    model, _, vocab = _load_model(args.checkpoint)
    if model.kind != "compound":
        raise InputError(f"{model.kind} checkpoint has no variational posterior")
    sents = [[w.lower() for w in s] for s in corpus.read_text_sentences(_require(args.corpus, "corpus"))]
    keep = [i for i, s in enumerate(sents) if s]
    means = np.stack([model.posterior_mean(np.asarray(vocab.encode(sents[i])))[0] for i in keep])
    return model, vocab, sents, keep, means


def format_means(ids, means: np.ndarray) -> str:
    """One row per sentence: id, then z_dim floats (repr precision)."""
    return "".join(f"{i}\t" + " ".join(repr(float(x)) for x in row) + "\n" for i, row in zip(ids, means))


def cmd_means(args) -> int:
    _, _, _, keep, means = _compound_means(args)
    _write(args.out, format_means(keep, means))
    return 0


def cmd_neighbors(args) -> int:
    _, _, sents, keep, means = _compound_means(args)
    pos = {sid: r for r, sid in enumerate(keep)}
    queries = [int(q) for q in args.query.split(",")]
    for q in queries:
        if q not in pos:
            raise InputError(f"query id {q} is not a sentence of the corpus")
    nn = analysis.nearest_neighbors(means, [pos[q] for q in queries], args.k)
    lines = []
    for q in queries:
        lines.append(f"query\t{q}\t{' '.join(sents[q])}")
        for rank, (r, sim) in enumerate(nn[pos[q]], 1):
            lines.append(f"{rank}\t{keep[r]}\t{sim:.6f}\t{' '.join(sents[keep[r]])}")
    _write(args.out, "\n".join(lines) + "\n")
    return 0


def cmd_subtree_pca(args) -> int:
    model, vocab, sents, keep, means = _compound_means(args)
    rows = [r for r, sid in enumerate(keep) if len(sents[sid]) >= 2]
    trees = [model.parse(np.asarray(vocab.encode(sents[keep[r]]))) for r in rows]
    report = analysis.subtree_pca(means[rows], trees, [sents[keep[r]] for r in rows], args.pattern, args.top_m)
    _write(args.out, report.to_text())
    return 0


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="grammar-induction", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="treebank -> vocab, id corpus and gold-span files")
    p.add_argument("--train", required=True)
    p.add_argument("--valid")
    p.add_argument("--test")
    p.add_argument("--vocab-cap", type=int, default=10000)
    p.add_argument("--punct-tags")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a grammar")
    p.add_argument("--config")
    p.add_argument("--model", choices=["scalar", "neural", "compound"])
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--input-format", choices=["trees", "text"], default="trees")
    p.add_argument("--punct-tags")
    p.add_argument("--checkpoint")
    p.add_argument("--out", help="directory for manifest, log and (default) checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("parse", help="MAP-parse one sentence per line")
    p.add_argument("sentences")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("eval", help="score predicted trees against gold trees")
    p.add_argument("pred")
    p.add_argument("gold")
    p.add_argument("--eval-mode", choices=["sentence", "corpus"], default="sentence")
    p.add_argument("--punct-tags")
    p.add_argument("--baselines", help="comma list of left,right,random")
    p.add_argument("--oracle", action="store_true", help="add right-binarized gold row")
    p.add_argument("--align-labels", help="comma list of gold labels for the alignment table")
    p.add_argument("--skip-vacuous", action="store_true",
                   help="skip sentences without non-trivial spans instead of scoring them 100")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output prefix (.tsv, .kv, .align.csv)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("perplexity", help="(importance-weighted) test perplexity")
    p.add_argument("corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--iw-samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_perplexity)

    for name, func, help_ in (("means", cmd_means, "export posterior means"),
                              ("neighbors", cmd_neighbors, "nearest neighbors by posterior mean"),
                              ("subtree-pca", cmd_subtree_pca, "top principal component per subtree")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("corpus")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--out")
        if name == "neighbors":
            p.add_argument("--query", required=True, help="comma list of sentence ids")
            p.add_argument("--k", type=int, default=5)
        if name == "subtree-pca":
            p.add_argument("--pattern", required=True)
            p.add_argument("--top-m", type=int, default=5)
        p.set_defaults(func=func)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, corpus.BracketError, ChartError, analysis.PCAError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
