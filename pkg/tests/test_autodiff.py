import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tracemil.autodiff import (AutodiffError, Graph, NonFiniteError, ParamLayout, ShapeError, backward,
                               finite_diff_check, forward, relative_error)


def square_graph():
    g = Graph()
    x = g.param("x", (1,))
    g.output("y", g.set_loss(g.affine(x, x)))
    return g


def mlp_graph(n_in=5, n_hidden=7, n_out=3, act="tanh"):
    g = Graph()
    x = g.input("x")
    t = g.input("t")
    W1, b1 = g.param("W1", (n_in, n_hidden)), g.param("b1", (n_hidden,))
    W2, b2 = g.param("W2", (n_hidden, n_out)), g.param("b2", (n_out,))
    h = getattr(g, act)(g.affine(x, W1, b1))
    logits = g.output("logits", g.affine(h, W2, b2))
    g.output("loss", g.set_loss(g.cross_entropy(logits, t)))
    return g


def mlp_inputs(rng, n_in=5, n_hidden=7, n_out=3):
    t = np.zeros(n_out)
    t[rng.integers(n_out)] = 1.0
    return {"x": rng.normal(size=n_in), "t": t,
            "W1": rng.normal(size=(n_in, n_hidden)), "b1": rng.normal(size=n_hidden),
            "W2": rng.normal(size=(n_hidden, n_out)), "b2": rng.normal(size=n_out)}


def loop_mlp(inp):
    # straight-line forward written without numpy matrix ops
    n_in, n_hidden = inp["W1"].shape
    n_out = inp["W2"].shape[1]
    h = []
    for j in range(n_hidden):
        s = inp["b1"][j]
        for i in range(n_in):
            s += inp["x"][i] * inp["W1"][i, j]
        h.append(np.tanh(s))
    logits = []
    for k in range(n_out):
        s = inp["b2"][k]
        for j in range(n_hidden):
            s += h[j] * inp["W2"][j, k]
        logits.append(s)
    m = max(logits)
    lse = m + np.log(sum(np.exp(z - m) for z in logits))
    return np.array(logits), lse - sum(t * z for t, z in zip(inp["t"], logits))


def test_square_forward_and_gradient():
    g = square_graph()
    out = forward(g, {"x": np.array([3.0])})
    assert out["y"] == 9.0
    assert backward(g).values.tolist() == [6.0]


def test_softmax_of_zeros_is_uniform():
    g = Graph()
    s = g.input("s")
    g.output("p", g.masked_softmax(s))
    p = g.forward({"s": np.zeros(3)})["p"]
    np.testing.assert_allclose(p, np.full(3, 1 / 3), rtol=0, atol=1e-15)


def test_masked_softmax_gives_absent_entries_exact_zero():
    g = Graph()
    s, m = g.input("s"), g.input("m")
    g.output("p", g.masked_softmax(s, m))
    p = g.forward({"s": np.array([1.0, 5.0, -2.0]), "m": np.array([1.0, 0.0, 1.0])})["p"]
    assert p[1] == 0.0
    assert abs(p.sum() - 1.0) <= 1e-15


def test_mlp_forward_matches_loop_oracle():
    rng = np.random.default_rng(0)
    g = mlp_graph()
    for _ in range(10):
        inp = mlp_inputs(rng)
        out = g.forward(inp)
        logits, loss = loop_mlp(inp)
        np.testing.assert_allclose(out["logits"], logits, rtol=0, atol=1e-12)
        assert abs(out["loss"] - loss) <= 1e-12


def test_constant_loss_gives_zero_gradient():
    g = Graph()
    x = g.input("x")
    g.param("W", (2, 2))
    g.set_loss(g.affine(x, x))
    g.forward({"x": np.array([1.0, 2.0]), "W": np.ones((2, 2))})
    grad = g.backward()
    assert grad.values.shape == (4,)
    assert not grad.values.any()


@pytest.mark.parametrize("act", ["tanh", "relu"])
def test_mlp_gradient_matches_finite_differences(act):
    rng = np.random.default_rng(1)
    g = mlp_graph(act=act)
    for _ in range(5):
        report = finite_diff_check(g, mlp_inputs(rng), 1e-5)
        assert report.max_error <= 1e-6, report.errors


def test_linear_model_finite_differences_tight():
    g = Graph()
    x = g.input("x")
    w, b = g.param("w", (6,)), g.param("b", ())
    g.set_loss(g.affine(x, w, b))
    rng = np.random.default_rng(2)
    report = finite_diff_check(g, {"x": rng.normal(size=6), "w": rng.normal(size=6), "b": np.array(0.3)}, 1e-5)
    assert report.max_error <= 1e-8


def test_every_op_matches_finite_differences():
    rng = np.random.default_rng(3)
    g = Graph()
    X = g.input("X")
    mask = g.input("mask")
    t = g.input("t")
    A, B = g.param("A", (4, 3)), g.param("B", (4, 2))
    v = g.param("v", (3,))
    W = g.param("W", (5, 3))
    h1, h2 = g.tanh(g.affine(X, A)), g.relu(g.affine(X, B))
    attn = g.masked_softmax(g.affine(h1, v), mask)
    pooled = g.concat(g.weighted_sum(attn, h1), g.weighted_sum(attn, h2))
    g.set_loss(g.cross_entropy(g.affine(pooled, W), t))
    inputs = {"X": rng.normal(size=(6, 4)), "mask": np.array([1, 1, 0, 1, 0, 1.0]), "t": np.array([0, 1, 0.0]),
              "A": rng.normal(size=(4, 3)), "B": rng.normal(size=(4, 2)), "v": rng.normal(size=3),
              "W": rng.normal(size=(5, 3))}
    report = finite_diff_check(g, inputs, 1e-5)
    assert report.max_error <= 1e-6, report.errors
    assert report.worst_block in report.errors


def test_finite_diff_rejects_nonpositive_step():
    g = square_graph()
    for step in (0.0, -1e-5):
        with pytest.raises(ValueError, match="step must be positive"):
            finite_diff_check(g, {"x": np.array([1.0])}, step)


@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2 ** 16))
@settings(max_examples=30, deadline=None)
def test_backward_is_linear_in_the_loss(a, b, seed):
    # cross-entropy is linear in its target, so target a*t1 + b*t2 gives loss a*L1 + b*L2
    rng = np.random.default_rng(seed)
    g = mlp_graph()
    inp = mlp_inputs(rng)
    t1, t2 = np.eye(3)[rng.permutation(3)[:2]]
    grads = []
    for t in (t1, t2, a * t1 + b * t2):
        g.forward({**inp, "t": t})
        grads.append(g.backward().values)
    g1, g2, gt = grads
    scale = max(1.0, np.abs(g1).max(), np.abs(g2).max()) * (abs(a) + abs(b) + 1)
    np.testing.assert_allclose(gt, a * g1 + b * g2, rtol=0, atol=1e-12 * scale)


def test_repeated_calls_are_bit_identical():
    rng = np.random.default_rng(4)
    g = mlp_graph()
    inp = mlp_inputs(rng)
    out1 = g.forward(inp)["loss"].copy()
    g1 = g.backward().values.copy()
    out2 = g.forward(inp)["loss"]
    g2 = g.backward().values
    assert out1.tobytes() == out2.tobytes()
    assert g1.tobytes() == g2.tobytes()


def test_shape_mismatch_names_the_node():
    g = Graph()
    x = g.input("x")
    w = g.param("w", (3, 2))
    g.output("y", g.affine(x, w, name="proj"))
    with pytest.raises(ShapeError, match="proj"):
        g.forward({"x": np.ones(4), "w": np.ones((3, 2))})


def test_non_finite_intermediate_names_the_node():
    g = Graph()
    x = g.input("x")
    w = g.param("w", (1,))
    g.output("y", g.affine(x, w, name="blowup"))
    with pytest.raises(NonFiniteError, match="blowup"):
        g.forward({"x": np.array([np.inf]), "w": np.array([1.0])})


def test_backward_preconditions():
    g = square_graph()
    with pytest.raises(AutodiffError, match="forward"):
        g.backward()
    g2 = Graph()
    x = g2.param("x", (2,))
    g2.set_loss(g2.tanh(x))
    g2.forward({"x": np.ones(2)})
    with pytest.raises(AutodiffError, match="scalar"):
        g2.backward()


def test_layout_is_contiguous_in_declaration_order():
    layout = ParamLayout.from_shapes([("a", (2, 3)), ("b", (4,)), ("c", ())])
    assert [b.name for b in layout.blocks] == ["a", "b", "c"]
    assert [b.offset for b in layout.blocks] == [0, 6, 10]
    assert layout.size == 11
    flat = np.arange(11.0)
    parts = layout.split(flat)
    assert parts["a"].shape == (2, 3)
    np.testing.assert_array_equal(layout.flatten(parts), flat)


def test_relative_error_is_scale_free():
    a = np.array([1.0, 2.0])
    assert relative_error(a, a) == 0.0
    assert relative_error(np.zeros(2), np.zeros(2)) == 0.0
    assert relative_error(1e6 * a, 1e6 * (a + 1e-3)) == pytest.approx(relative_error(a, a + 1e-3))
