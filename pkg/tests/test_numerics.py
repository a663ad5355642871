import logging
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mfasda import numerics as nx
from mfasda.numerics import AdamState, ContractError, DimensionError, RngStream, Tensor

from oracles import central_difference, gradcheck, matmul_loops, rel_err, softplus_direct

finite = st.floats(-2, 2, allow_nan=False, allow_infinity=False)


def vec(n):
    return arrays(np.float64, n, elements=finite)


# --------------------------------------------------------------------- affine


def test_affine_identity():
    out = nx.affine(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    assert out.data.tolist() == [[1.0, 2.0]]


def test_affine_forced_arithmetic():
    out = nx.affine(Tensor([[1.0, 1.0]]), Tensor([[1.0], [1.0]]), Tensor([-2.0]))
    assert out.data.tolist() == [[0.0]]


def test_affine_matches_triple_loop(rng):
    x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
    out = nx.affine(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, matmul_loops(x.tolist(), w.tolist(), b.tolist()), rtol=0, atol=1e-12)


def test_affine_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.affine(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.ones(2)))
    with pytest.raises(DimensionError):
        nx.affine(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))), Tensor(np.ones(5)))


def test_affine_records_only_when_needed():
    out = nx.affine(Tensor(np.ones((1, 2))), Tensor(np.eye(2)), Tensor(np.zeros(2)))
    assert not out.requires_grad
    out = nx.affine(Tensor(np.ones((1, 2))), Tensor(np.eye(2), requires_grad=True), Tensor(np.zeros(2)))
    assert out.requires_grad


# -------------------------------------------------------------- activations


def test_softplus_examples():
    assert nx.softplus_value(0.0, 500) == pytest.approx(math.log(2) / 500, abs=1e-15)
    assert nx.softplus_value(0.01, 500) == pytest.approx(0.0100134, abs=1e-7)
    assert nx.softplus_value(0.01, 500) == pytest.approx(softplus_direct(0.01, 500), rel=1e-12)


def test_softplus_stable_branches():
    assert nx.softplus_value(1.0, 500) == 1.0
    tiny = nx.softplus_value(-1.0, 500)
    assert 0 < tiny == pytest.approx(math.exp(-500) / 500, rel=1e-12)
    assert np.isfinite(nx.softplus_value(1e6, 500))


def test_softmax_uniform():
    np.testing.assert_allclose(nx.softmax_value([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-15)


@given(vec(5))
def test_softmax_is_a_distribution(x):
    s = nx.softmax_value(x)
    assert np.all(s >= 0)
    assert abs(s.sum() - 1) <= 1e-12


@given(st.floats(-5, 5), st.floats(-5, 5), st.sampled_from([1.0, 10.0, 500.0]))
def test_softplus_monotone_and_bounded(a, b, beta):
    lo, hi = sorted((a, b))
    assert nx.softplus_value(lo, beta) <= nx.softplus_value(hi, beta)
    assert nx.softplus_value(a, beta) >= max(a, 0.0) - 1e-12


def test_softplus_asymptotes():
    for beta in (1.0, 500.0):
        assert abs(nx.softplus_value(1e3, beta) - 1e3) < 1e-9
        assert nx.softplus_value(-1e3, beta) < 1e-9


def test_relu_and_sigmoid_values():
    assert nx.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert nx.sigmoid_value(0.0) == 0.5
    assert np.isfinite(nx.sigmoid_value(np.array([-800.0, 800.0]))).all()


# ----------------------------------------------------------------- losses


def test_bce_examples():
    assert nx.binary_cross_entropy(Tensor([1 - nx.EPS_CLIP]), [1.0]).item() == pytest.approx(0, abs=1e-6)
    assert nx.binary_cross_entropy(Tensor([0.5]), [1.0]).item() == pytest.approx(math.log(2), abs=1e-12)
    assert nx.binary_cross_entropy(Tensor([0.5]), [0.0]).item() == pytest.approx(math.log(2), abs=1e-12)


def test_bce_clamps_saturated_probabilities():
    loss = nx.binary_cross_entropy(Tensor([0.0, 1.0]), [1.0, 0.0], reduction="none").data
    assert np.all(np.isfinite(loss))
    assert loss == pytest.approx([-math.log(nx.EPS_CLIP)] * 2)


def test_cosine_examples():
    a = Tensor([1.0, 2.0])
    assert nx.cosine_similarity(a, a).item() == pytest.approx(1.0, abs=1e-15)
    assert nx.cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 3.0])).item() == 0.0
    assert nx.cosine_similarity(a, Tensor([2.0, 1.0])).item() == pytest.approx(0.8, abs=1e-15)


def test_cosine_zero_norm_is_zero_and_logged(caplog):
    with caplog.at_level(logging.WARNING, logger="mfasda.numerics"):
        c = nx.cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 2.0]))
    assert c.item() == 0.0
    assert "degenerate" in caplog.text


# --------------------------------------------------------------- gradients


def _op_cases():
    return {
        "add": (lambda a, b: (a + b).sum(), 2),
        "sub": (lambda a, b: (a - b * 3.0).sum(), 2),
        "mul": (lambda a, b: (a * b).sum(), 2),
        "div": (lambda a, b: (a / (nx.exp(b) + 1.0)).sum(), 2),
        "relu": (lambda a, b: (nx.relu(a) * b).sum(), 2),
        "sigmoid": (lambda a, b: (nx.sigmoid(a) * b).sum(), 2),
        "log": (lambda a, b: (nx.log(nx.exp(a) + 1.0) * b).sum(), 2),
        "softplus": (lambda a, b: (nx.softplus(a, 3.0) * b).sum(), 2),
        "softmax": (lambda a, b: (nx.softmax(a) * b).sum(), 2),
        "cosine": (lambda a, b: nx.cosine_similarity(a, b), 2),
        "bce": (lambda a, b: nx.binary_cross_entropy(nx.sigmoid(a * b), [1.0, 0.0, 1.0, 0.0]), 2),
    }


@pytest.mark.parametrize("name", sorted(_op_cases()))
@given(a=vec(4), b=vec(4))
def test_elementwise_gradients(name, a, b):
    fn, _ = _op_cases()[name]
    if name == "relu" and np.min(np.abs(a)) < 1e-3:
        return  # finite differences straddle the kink
    if name == "cosine" and (np.linalg.norm(a) < 1e-2 or np.linalg.norm(b) < 1e-2):
        return
    ta, tb = Tensor(a.copy(), True), Tensor(b.copy(), True)
    nx.backward(fn(ta, tb))
    arrays_ = {"a": ta.data, "b": tb.data}
    for key, t in (("a", ta), ("b", tb)):
        g = t.grad if t.grad is not None else np.zeros(4)
        for i in range(4):
            num = central_difference(lambda: fn(Tensor(arrays_["a"]), Tensor(arrays_["b"])).item(), arrays_[key], i)
            assert rel_err(g[i], num) <= 1e-4, (name, key, i, g[i], num)


def test_matmul_gradient(rng):
    x, w, b = rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (4, 2)), rng.uniform(-2, 2, 2)
    params = {"x": x, "w": w, "b": b}
    t = {k: Tensor(v, True) for k, v in params.items()}
    nx.backward(nx.affine(t["x"], t["w"], t["b"]).sum())
    loss = lambda: float(nx.affine(Tensor(x), Tensor(w), Tensor(b)).data.sum())  # noqa: E731
    assert gradcheck(params, {k: t[k].grad for k in params}, loss, rng) <= 1e-4


def test_sum_wx_gradient_matches_finite_differences(rng):
    w, x = rng.uniform(-2, 2, (5, 3)), rng.uniform(-2, 2, (2, 5))
    tw = Tensor(w, True)
    nx.backward((Tensor(x) @ tw).sum())
    loss = lambda: float((x @ w).sum())  # noqa: E731
    assert gradcheck({"w": w}, {"w": tw.grad}, loss, rng, n_coords=15) <= 1e-4


def test_constant_loss_has_zero_gradients():
    w = Tensor(np.ones(3), True)
    loss = (w * 0.0).sum() + 5.0
    nx.backward(loss)
    assert np.all(w.grad == 0)


def test_three_layer_mlp_bce_gradcheck():
    gen = np.random.default_rng(7)
    for point in range(20):
        params = {
            "W0": gen.uniform(-1, 1, (4, 6)), "b0": gen.uniform(-1, 1, 6),
            "W1": gen.uniform(-1, 1, (6, 5)), "b1": gen.uniform(-1, 1, 5),
            "W2": gen.uniform(-1, 1, (5, 1)), "b2": gen.uniform(-1, 1, 1),
        }
        x, y = gen.uniform(-2, 2, (3, 4)), gen.integers(0, 2, 3).astype(float)

        def forward(t):
            h = nx.relu(nx.affine(Tensor(x), t["W0"], t["b0"]))
            h = nx.relu(nx.affine(h, t["W1"], t["b1"]))
            p = nx.sigmoid(nx.affine(h, t["W2"], t["b2"]))
            return nx.binary_cross_entropy(p, y[:, None])

        t = {k: Tensor(v, True) for k, v in params.items()}
        nx.backward(forward(t))
        loss = lambda: forward({k: Tensor(v) for k, v in params.items()}).item()  # noqa: E731
        assert gradcheck(params, {k: t[k].grad for k in params}, loss, gen, n_coords=6) <= 1e-4, point


def test_backward_rejects_non_scalar_root():
    with pytest.raises(ContractError):
        nx.backward(Tensor(np.ones(3), True) * 2.0)


def test_backward_clears_graph():
    w = Tensor(np.ones(2), True)
    loss = (w * w).sum()
    nx.backward(loss)
    assert loss._parents == () and loss._backward is None


def test_shared_subexpression_accumulates():
    w = Tensor(np.array([3.0]), True)
    y = w * w
    nx.backward((y + y).sum())
    assert w.grad.tolist() == [12.0]


# -------------------------------------------------------------------- Adam


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    nx.adam_step(p, {"w": np.zeros(2)}, AdamState(lr=0.1))
    assert p["w"].tolist() == [1.0, -2.0]


def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([0.0])}
    nx.adam_step(p, {"w": np.array([1.0])}, AdamState(lr=0.1))
    assert p["w"][0] == pytest.approx(-0.1, abs=1e-8)


def test_adam_is_deterministic():
    def go():
        gen = np.random.default_rng(3)
        p, s = {"w": gen.normal(size=4)}, AdamState(lr=0.01)
        for _ in range(5):
            nx.adam_step(p, {"w": gen.normal(size=4)}, s)
        return p["w"]

    assert np.array_equal(go(), go())


def test_adam_state_shapes_and_counter():
    p, s = {"w": np.zeros((2, 3))}, AdamState()
    for step in range(1, 4):
        nx.adam_step(p, {"w": np.ones((2, 3))}, s)
        assert s.step == step
        assert s.m["w"].shape == s.v["w"].shape == (2, 3)


def test_adam_nan_gradient_names_parameter():
    with pytest.raises(FloatingPointError, match="C_rgb.W"):
        nx.adam_step({"C_rgb.W": np.zeros(2)}, {"C_rgb.W": np.array([np.nan, 0.0])}, AdamState())


# ------------------------------------------------------------ dropout / rng


def test_dropout_rate_zero_is_all_ones():
    assert np.all(nx.dropout_mask((4, 5), 0.0, RngStream(1)) == 1.0)


def test_dropout_keep_fraction():
    m = nx.dropout_mask(100_000, 0.5, RngStream(2))
    assert abs(np.mean(m > 0) - 0.5) <= 0.01
    assert set(np.unique(m)) <= {0.0, 2.0}


def test_dropout_preserves_expectation():
    m = nx.dropout_mask((200_000,), 0.3, RngStream(5))
    assert abs(m.mean() - 1.0) < 0.01


def test_dropout_same_seed_same_mask():
    assert np.array_equal(nx.dropout_mask(50, 0.3, RngStream(9)), nx.dropout_mask(50, 0.3, RngStream(9)))


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_dropout_rejects_bad_rate(rate):
    with pytest.raises(ContractError):
        nx.dropout_mask(3, rate, RngStream(0))


def test_rng_stream_replays_from_seed_and_counter():
    a = RngStream(11)
    first = a.generator().random(3)
    second = a.generator().random(3)
    assert np.array_equal(RngStream(11, 1).generator().random(3), second)
    assert not np.array_equal(first, second)


def test_rng_children_are_independent_and_stable():
    root = RngStream(4)
    x = root.child("a", 1).generator().random(3)
    assert np.array_equal(x, RngStream(4).child("a", 1).generator().random(3))
    assert not np.array_equal(x, root.child("a", 2).generator().random(3))
    assert root.counter == 0
