import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from grammar_induction import diffmath as dm
from grammar_induction import trainer as tr
from grammar_induction.chart import inside_logprob
from grammar_induction.grammar import GrammarParams, GrammarSpec, compound_rule_logprobs, rule_logprobs
from grammar_induction.model import PCFGModel
from grammar_induction.synthetic import benchmark_grammar, sample_corpus
from grammar_induction.trainer import AdamState, TrainConfig, adam_step, clip_grad_norm, train

from gradcheck import check_gradients
from tiny import quadrature_log_marginal, tiny_compound, trapezoid_log_marginal

SMALL = dict(num_nonterminals=2, num_preterminals=3, symbol_dim=8, z_dim=2, encoder_hidden=4,
             encoder_embed_dim=4)


def corpus(n, seed=0, max_len=8):
    data = sample_corpus(benchmark_grammar(), n, np.random.default_rng(seed), max_len=max_len)
    return [w for w, _ in data]


# ------------------------------------------------------------------ config


def test_default_config_values():
    text = TrainConfig().to_text()
    for line in ("adam_beta1=0.75", "adam_beta2=0.999", "learning_rate=0.001", "grad_clip_norm=3.0",
                 "epochs=10", "batch_size=4", "curriculum_start_len=30", "curriculum_increment=1",
                 "num_nonterminals=30", "num_preterminals=60", "symbol_dim=256", "z_dim=64",
                 "encoder_hidden=512"):
        assert line in text.splitlines()


def test_config_text_round_trip_and_overrides():
    cfg = TrainConfig(model="neural", epochs=3, learning_rate=0.01)
    assert TrainConfig.from_text(cfg.to_text()) == cfg
    assert TrainConfig.from_text("epochs = 2  # short\n", seed=7) == TrainConfig(epochs=2, seed=7)
    with pytest.raises(ValueError):
        TrainConfig.from_text("nonsense=1\n")
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(curriculum_start_len=1)


# -------------------------------------------------------------------- Adam


def test_adam_matches_hand_trace():
    cfg = TrainConfig()
    p = {"w": dm.parameter([0.5, -1.0])}
    grads = [np.array([0.1, -0.2]), np.array([0.3, 0.1]), np.array([-0.2, 0.4])]
    # hand-stepped reference
    b1, b2, lr, eps = 0.75, 0.999, 0.001, 1e-8
    w = [0.5, -1.0]
    m = [0.0, 0.0]
    v = [0.0, 0.0]
    for t, g in enumerate(grads, 1):
        for d in range(2):
            m[d] = b1 * m[d] + (1 - b1) * g[d]
            v[d] = b2 * v[d] + (1 - b2) * g[d] ** 2
            mhat = m[d] / (1 - b1 ** t)
            vhat = v[d] / (1 - b2 ** t)
            w[d] -= lr * mhat / (math.sqrt(vhat) + eps)
    state = AdamState()
    for g in grads:
        assert adam_step(p, {"w": g}, state, cfg)
    assert np.max(np.abs(p["w"].data - w)) < 1e-12
    assert state.step == 3 and state.m["w"].shape == (2,)


def test_adam_step_size_bound():
    cfg = TrainConfig()
    p = {"w": dm.parameter([0.0])}
    state = AdamState()
    prev = 0.0
    for _ in range(20):
        adam_step(p, {"w": np.array([1.0])}, state, cfg)
        delta = p["w"].data[0] - prev
        assert delta < 0 and abs(delta) <= cfg.learning_rate + 1e-15
        prev = p["w"].data[0]


def test_clip_scales_norm_30_by_tenth():
    g = {"a": np.array([18.0, 0.0]), "b": np.array([[24.0]])}
    clipped, norm = clip_grad_norm(g, 3.0)
    assert norm == 30.0
    assert np.allclose(clipped["a"], [1.8, 0.0], atol=1e-15) and np.allclose(clipped["b"], [[2.4]], atol=1e-15)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.floats(0.1, 10))
def test_post_clip_norm_bounded(values, clip):
    g = {"x": np.array(values)}
    clipped, norm = clip_grad_norm(g, clip)
    post = float(np.linalg.norm(clipped["x"]))
    if norm > clip:
        assert post <= clip + 1e-9
    else:
        assert np.array_equal(clipped["x"], g["x"])


def test_adam_skips_non_finite_gradient():
    p = {"w": dm.parameter([1.0, 2.0])}
    state = AdamState()
    assert not adam_step(p, {"w": np.array([np.nan, 0.0])}, state, TrainConfig())
    assert p["w"].data.tolist() == [1.0, 2.0] and state.step == 0


# -------------------------------------------------------------- objectives


def test_elbo_with_zero_kl_is_conditional_likelihood():
    model = tiny_compound(seed=3, Z=2, scale=0.7)
    model.encoder["head.W"].data[...] = 0.0
    model.encoder["head.b"].data[...] = 0.0
    eps = np.array([0.4, -0.9])
    words = [0, 2, 1]
    val = tr.elbo(words, model.grammar, model.encoder, eps).item()
    cond = inside_logprob(words, compound_rule_logprobs(model.grammar, eps)).item()
    assert val == cond


def test_elbo_below_quadrature_log_marginal():
    model = tiny_compound(seed=0, scale=0.5)
    words = [0, 1]
    truth = quadrature_log_marginal(model, words)
    assert abs(truth - trapezoid_log_marginal(model, words, n=16001)) < 1e-5
    rng = np.random.default_rng(0)
    elbos = [tr.elbo(words, model.grammar, model.encoder, rng.standard_normal(1)).item() for _ in range(200)]
    assert np.mean(elbos) <= truth + 1e-3


def test_elbo_gradient_finite_differences():
    model = tiny_compound(seed=5, Z=2, scale=0.5)
    eps = np.array([0.3, -0.6])
    params = [t for _, t in model.named_parameters()]
    err = check_gradients(lambda: tr.elbo([0, 2, 1], model.grammar, model.encoder, eps), params)
    assert err < 1e-5


def test_neural_objective_delegates_to_inside():
    params = GrammarParams.initialize(GrammarSpec(2, 3, 20, 8), "neural", np.random.default_rng(0))
    words = [1, 6, 14, 2]
    assert tr.neural_objective(words, params).item() == inside_logprob(words, rule_logprobs(params)).item()
    with pytest.raises(ValueError):
        tr.neural_objective(words, tiny_compound().grammar)


def _full_batch_run(steps=20, seed=0):
    sents = corpus(50, seed=1)
    cfg = TrainConfig(learning_rate=0.01)
    model = PCFGModel.initialize("neural", GrammarSpec(2, 3, 20, 8), np.random.default_rng(seed))
    params = model.parameters()
    state = AdamState()
    values = []
    for _ in range(steps):
        with dm.Tape() as tape:
            total = tr.batch_objective(model, tr._grouped(list(range(50)), sents), None)
            loss = dm.mul(total, -1.0 / 50)
        values.append(total.item())
        for p in params.values():
            p.grad = None
        dm.backward(tape, loss)
        adam_step(params, {k: p.grad for k, p in params.items()}, state, cfg)
    return values


def test_neural_objective_increases_full_batch():
    values = _full_batch_run()
    violations = sum(1 for a, b in zip(values, values[1:]) if b < a)
    assert violations <= 2
    assert values[-1] > values[0]
    assert values == _full_batch_run()


# ---------------------------------------------------------------- training


def test_curriculum_filter_and_visits():
    rng = np.random.default_rng(0)
    sents = [rng.integers(0, 20, size=n) for n in (3, 5, 31, 4, 30, 2, 6)]
    seen = {}
    cfg = TrainConfig(model="neural", epochs=2, batch_size=2, **{k: v for k, v in SMALL.items() if k != "z_dim"})
    result = train(cfg, sents, sents[:2], 20, on_batch=lambda e, b: seen.setdefault(e, []).extend(b))
    long_id = 2
    assert long_id not in seen[1] and long_id in seen[2]
    for e, max_len in ((1, 30), (2, 31)):
        assert sorted(seen[e]) == [i for i, s in enumerate(sents) if len(s) <= max_len]
        assert sorted(result.visited[e]) == sorted(seen[e])
    assert [r.max_len for r in result.history] == [30, 31]


def test_empty_curriculum_epochs_are_skipped(caplog):
    sents = corpus(12, max_len=8)
    sents = [s for s in sents if len(s) >= 4]
    cfg = TrainConfig(model="neural", epochs=3, curriculum_start_len=2, **{k: v for k, v in SMALL.items() if k != "z_dim"})
    result = train(cfg, sents, sents[:3], 20)
    assert [r.epoch for r in result.history] == [3]
    assert "no training sentences" in caplog.text


def test_early_stopping_keeps_best_epoch(tmp_path):
    sents = corpus(40, seed=2)
    cfg = TrainConfig(model="compound", epochs=4, checkpoint_path=str(tmp_path / "m.ckpt"),
                      log_path=str(tmp_path / "log.tsv"), **SMALL)
    result = train(cfg, sents[:32], sents[32:], 20)
    ppls = [r.valid_perplexity for r in result.history]
    assert result.best_epoch == 1 + int(np.argmin(ppls))
    assert result.best_perplexity == min(ppls)
    model, meta = PCFGModel.load(tmp_path / "m.ckpt")
    assert meta["epoch"] == result.best_epoch
    assert tr.validation_perplexity(model, [np.asarray(s) for s in sents[32:]], cfg.seed + 7919) == min(ppls)
    lines = (tmp_path / "log.tsv").read_text().splitlines()
    assert lines[0] == "epoch\tmax_len\ttrain_objective\tvalid_perplexity" and len(lines) == 5


def test_training_is_reproducible():
    sents = corpus(24, seed=3)
    cfg = TrainConfig(model="compound", epochs=2, **SMALL)
    a = train(cfg, sents[:20], sents[20:], 20)
    b = train(cfg, sents[:20], sents[20:], 20)
    assert a.checkpoint == b.checkpoint
    c = train(TrainConfig(model="compound", epochs=2, seed=1, **SMALL), sents[:20], sents[20:], 20)
    assert c.checkpoint != a.checkpoint


def test_nan_batches_skipped_then_aborted(monkeypatch):
    sents = corpus(16, seed=4)
    real = tr.batch_objective
    calls = {"n": 0}

    def flaky(model, batch_words, rng):
        calls["n"] += 1
        out = real(model, batch_words, rng)
        return dm.mul(out, float("nan")) if calls["n"] % 2 == 0 else out

    monkeypatch.setattr(tr, "batch_objective", flaky)
    cfg = TrainConfig(model="neural", epochs=1, **{k: v for k, v in SMALL.items() if k != "z_dim"})
    result = train(cfg, sents, sents[:4], 20)
    assert result.history[0].skipped_batches == 2

    monkeypatch.setattr(tr, "batch_objective", lambda m, b, r: dm.mul(real(m, b, r), float("nan")))
    with pytest.raises(tr.TrainingAborted):
        train(TrainConfig(model="neural", epochs=1, max_consecutive_skips=3,
                          **{k: v for k, v in SMALL.items() if k != "z_dim"}), sents, sents[:4], 20)


def test_checkpoint_round_trip(tmp_path):
    model = tiny_compound(seed=2, Z=2)
    blob = model.save(tmp_path / "c.ckpt", {"note": "x"})
    assert blob[:8] == b"GRINDCK1"
    loaded, meta = PCFGModel.load(tmp_path / "c.ckpt")
    assert meta["note"] == "x" and meta["kind"] == "compound"
    for (n1, a), (n2, b) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n1 == n2 and np.array_equal(a.data, b.data)
    assert loaded.to_bytes({"note": "x"}) == blob
    with pytest.raises(ValueError):
        PCFGModel.from_bytes(b"NOTACKPT" + blob[8:])
