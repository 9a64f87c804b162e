import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from grammar_induction import diffmath as dm
from grammar_induction.grammar import ResidualMLP, residual_mlp_forward

from gradcheck import check_gradients, random_away_from_zero

TOL = 1e-6


def test_relu_example():
    assert dm.relu(dm.Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_log_softmax_symmetric():
    out = dm.log_softmax(dm.Tensor([0.0, 0.0])).data
    assert np.allclose(out, [-math.log(2)] * 2, atol=1e-15)


def test_logsumexp_large_matches_extended_precision():
    mpmath.mp.dps = 50
    oracle = mpmath.mpf(1000) + mpmath.log(mpmath.exp(0) + mpmath.exp(0))
    got = dm.logsumexp(dm.Tensor([1000.0, 1000.0])).item()
    assert math.isfinite(got)
    assert abs(got - float(oracle)) < 1e-12


@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-1e6, 1e6)))
def test_logsumexp_and_log_softmax_overflow_safe(x):
    lse = dm.logsumexp(dm.Tensor(x)).item()
    assert math.isfinite(lse)
    m = x.max()
    assert abs(lse - (m + math.log(np.exp(x - m).sum()))) <= 1e-9 * max(1.0, abs(m))
    ls = dm.log_softmax(dm.Tensor(x)).data
    assert abs(dm.logsumexp(dm.Tensor(ls)).item()) < 1e-10


def test_logsumexp_all_neg_inf_row():
    v = dm.parameter([-np.inf, -np.inf])
    with dm.Tape() as tape:
        out = dm.logsumexp(v)
    assert out.item() == -np.inf


def test_linear_gradient_example():
    x = dm.Tensor([1.0, 2.0])
    w = dm.parameter([3.0, 4.0])
    with dm.Tape() as tape:
        loss = dm.sum(x * w)
    dm.backward(tape, loss)
    assert w.grad.tolist() == [1.0, 2.0]


def test_logsumexp_gradient_is_softmax(rng):
    v = dm.parameter(rng.normal(size=7))
    with dm.Tape() as tape:
        loss = dm.logsumexp(v)
    dm.backward(tape, loss)
    e = np.exp(v.data - v.data.max())
    assert np.allclose(v.grad, e / e.sum(), atol=1e-15)


def test_backward_errors():
    w = dm.parameter([1.0, 2.0])
    with dm.Tape() as tape:
        vec = w * 2.0
    with pytest.raises(dm.ShapeError):
        dm.backward(tape, vec)
    with dm.Tape() as tape:
        loss = dm.sum(w)
    dm.backward(tape, loss)
    with pytest.raises(dm.TapeError):
        dm.backward(tape, loss)


def test_shape_error_names_primitive_and_shapes():
    with pytest.raises(dm.ShapeError) as e:
        dm.matmul(dm.Tensor(np.ones((2, 3))), dm.Tensor(np.ones((2, 3))))
    msg = str(e.value)
    assert "matmul" in msg and "(2, 3)" in msg


def test_no_recording_outside_tape():
    w = dm.parameter([1.0])
    out = dm.exp(w)
    assert not out.requires_grad


def test_every_reachable_parameter_gets_gradient(rng):
    a, b, unused = (dm.parameter(rng.normal(size=3)) for _ in range(3))
    with dm.Tape() as tape:
        loss = dm.sum(dm.tanh(a) * b)
    dm.backward(tape, loss)
    assert a.grad is not None and b.grad is not None and unused.grad is None


# -------------------------------------------------- finite-difference suite


def _unary_cases(rng):
    x = random_away_from_zero(rng, (3, 4))
    pos = np.abs(x) + 0.5
    w = rng.normal(size=(3, 4))
    return {
        "relu": (lambda t: dm.relu(t), x),
        "sigmoid": (lambda t: dm.sigmoid(t), x),
        "tanh": (lambda t: dm.tanh(t), x),
        "exp": (lambda t: dm.exp(t), x),
        "log": (lambda t: dm.log(t), pos),
        "square": (lambda t: dm.square(t), x),
        "neg": (lambda t: dm.neg(t), x),
        "clamp": (lambda t: dm.clamp(t, -0.5, 0.5), np.where(np.abs(np.abs(x) - 0.5) < 0.05, x * 1.3, x)),
        "reshape": (lambda t: dm.reshape(t, (4, 3)), x),
        "transpose": (lambda t: dm.transpose(t, (1, 0)), x),
        "broadcast_to": (lambda t: dm.broadcast_to(t, (2, 3, 4)), x),
        "index_basic": (lambda t: dm.index(t, (slice(1, 3), 2)), x),
        "index_fancy": (lambda t: dm.index(t, (np.array([0, 2, 0]), np.array([1, 1, 1]))), x),
        "sum_axis": (lambda t: dm.sum(t, axis=0), x),
        "mean": (lambda t: dm.mean(t, axis=1), x),
        "max_pool": (lambda t: dm.max(t, axis=0), x),
        "logsumexp": (lambda t: dm.logsumexp(t, axis=1), x),
        "log_softmax": (lambda t: dm.log_softmax(t, axis=1), x),
    }, w


@pytest.mark.parametrize("name", list(_unary_cases(np.random.default_rng(0))[0]))
def test_unary_primitive_gradients(name):
    rng = np.random.default_rng(7)
    cases, _ = _unary_cases(rng)
    op, x = cases[name]
    p = dm.parameter(x)
    probe = None

    def loss():
        out = op(p)
        nonlocal probe
        if probe is None:
            probe = np.random.default_rng(3).normal(size=out.shape)
        return dm.sum(out * dm.Tensor(probe))

    assert check_gradients(loss, [p]) < TOL


@pytest.mark.parametrize("name", ["add", "sub", "mul", "matmul", "affine", "affine_batched", "concat", "stack"])
def test_binary_primitive_gradients(name):
    rng = np.random.default_rng(11)
    if name in ("add", "sub", "mul"):
        a, b = dm.parameter(rng.normal(size=(3, 4))), dm.parameter(rng.normal(size=(1, 4)))
        f = {"add": dm.add, "sub": dm.sub, "mul": dm.mul}[name]
        def out():
            return f(a, b)
        params = [a, b]
    elif name == "matmul":
        a, b = dm.parameter(rng.normal(size=(3, 4))), dm.parameter(rng.normal(size=(4, 2)))
        def out():
            return dm.matmul(a, b)
        params = [a, b]
    elif name.startswith("affine"):
        x = dm.parameter(rng.normal(size=(5, 4) if name == "affine_batched" else (4,)))
        W, bias = dm.parameter(rng.normal(size=(3, 4))), dm.parameter(rng.normal(size=3))
        def out():
            return dm.affine(x, W, bias)
        params = [x, W, bias]
    else:
        a, b = dm.parameter(rng.normal(size=(2, 3))), dm.parameter(rng.normal(size=(2, 3)))
        f = (lambda: dm.concat([a, b], axis=1)) if name == "concat" else (lambda: dm.stack([a, b], axis=1))
        out = f
        params = [a, b]
    probe = np.random.default_rng(5).normal(size=out().shape)
    assert check_gradients(lambda: dm.sum(out() * dm.Tensor(probe)), params) < TOL


def test_residual_mlp_three_layer_gradients():
    rng = np.random.default_rng(21)
    d_in, d = 5, 4
    p = {"W": dm.parameter(rng.normal(size=(d, d_in))), "b": dm.parameter(rng.normal(size=d))}
    for r in range(2):
        for k, s in (("U", (d, d)), ("p", (d,)), ("V", (d, d)), ("q", (d,))):
            p[f"res{r}.{k}"] = dm.parameter(rng.normal(size=s) * 0.7)
    mlp = ResidualMLP(p["W"], p["b"], [(p[f"res{r}.U"], p[f"res{r}.p"], p[f"res{r}.V"], p[f"res{r}.q"])
                                       for r in range(2)])
    x = dm.parameter(rng.normal(size=d_in))
    probe = dm.Tensor(rng.normal(size=d))
    err = check_gradients(lambda: dm.sum(residual_mlp_forward(mlp, x) * probe), list(p.values()) + [x])
    assert err < TOL


# -------------------------------------------------------------- Xavier


def test_xavier_bounds_and_determinism():
    a = math.sqrt(6 / 8)
    for seed in range(5):
        w = dm.xavier_uniform_init((4, 4), seed)
        assert np.all(np.abs(w) <= a)
        assert np.array_equal(w, dm.xavier_uniform_init((4, 4), seed))


def test_xavier_variance_monte_carlo():
    w = dm.xavier_uniform_init((1000, 1000), 99)
    a = math.sqrt(6 / 2000)
    assert abs(w.var() / (a * a / 3) - 1) < 0.02


def test_xavier_zero_dim_rejected():
    with pytest.raises(ValueError):
        dm.xavier_uniform_init((3, 0), 0)


def test_tape_replay_deterministic():
    def run():
        rng = np.random.default_rng(42)
        w = dm.parameter(rng.normal(size=(3, 3)))
        x = dm.Tensor(rng.normal(size=3))
        val, (g,) = dm.value_and_grad(lambda: dm.logsumexp(dm.tanh(dm.affine(x, w))), [w])
        return val, g
    v1, g1 = run()
    v2, g2 = run()
    assert v1 == v2 and np.array_equal(g1, g2)
