import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from der import diffcore
from der.diffcore import GraphBuilder, Node, backward, finite_difference, forward, probe_gradient, relative_error
from der.errors import GraphError, NonFiniteError, ShapeError, UnboundLeafError, UnknownProbeError
from der.qnets import MixerKind, NetDims, add_agent_nets, add_mixer, init_params, one_hot

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def away_from_zero(rng, shape):
    """Values with |x| >= 0.1 so relu/abs kinks stay outside the difference stencil."""
    return rng.choice([-1.0, 1.0], size=shape) * (0.1 + np.abs(rng.normal(size=shape)))


def assert_matches_fd(graph, loss, bindings, tol=1e-4):
    report = backward(graph, loss, bindings)
    for name in graph.params:
        estimate = finite_difference(graph, loss, bindings, name)
        assert relative_error(report.params[name], estimate) <= tol, name


@pytest.mark.parametrize("op", ["relu", "abs", "elu"])
@given(seed=seeds)
@settings(max_examples=150)
def test_unary_gradients_match_finite_differences(op, seed):
    rng = np.random.default_rng(seed)
    b = GraphBuilder()
    x = b.param("x")
    y = getattr(b, op)(x)
    loss = b.sum(b.mul(y, b.const("c")))
    bindings = {"x": away_from_zero(rng, (3, 4)), "c": rng.normal(size=(3, 4))}
    assert_matches_fd(b.build(), loss, bindings)


@pytest.mark.parametrize("op", ["add", "mul", "sqerr"])
@given(seed=seeds)
@settings(max_examples=150)
def test_binary_gradients_with_broadcasting(op, seed):
    rng = np.random.default_rng(seed)
    b = GraphBuilder()
    y = getattr(b, op)(b.param("a"), b.param("b"))
    loss = b.sum(b.mul(y, b.const("c")))
    bindings = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(1, 4)), "c": rng.normal(size=(3, 4))}
    assert_matches_fd(b.build(), loss, bindings)


@given(seed=seeds)
@settings(max_examples=150)
def test_matmul_and_axis_sum_gradients(seed):
    rng = np.random.default_rng(seed)
    b = GraphBuilder()
    y = b.sum(b.matmul(b.param("a"), b.param("w")), axis=1)
    loss = b.sum(b.mul(y, b.const("c")))
    bindings = {"a": rng.normal(size=(5, 3)), "w": rng.normal(size=(3, 2)), "c": rng.normal(size=(5, 1))}
    assert_matches_fd(b.build(), loss, bindings)


@pytest.mark.parametrize("kind", list(MixerKind), ids=lambda k: k.value)
@given(seed=seeds)
@settings(max_examples=40)
def test_composed_network_gradients(kind, seed):
    rng = np.random.default_rng(seed)
    dims = NetDims(n_agents=2, n_actions=3, obs_dim=2, state_dim=3, agent_hidden=(4,), mixer_embed=3)
    store = init_params(seed % 1000, dims, kind)
    b = GraphBuilder()
    qs = add_agent_nets(b, dims.n_agents, 1)
    state = b.const("state") if kind is MixerKind.MONOTONIC else None
    q_tot = add_mixer(b, kind, qs, state)
    loss = b.sum(b.sqerr(b.const("y"), q_tot))
    rows = 4
    bindings = {**store.online, "state": rng.normal(size=(rows, dims.state_dim)), "y": rng.normal(size=(rows, 1))}
    for i in range(dims.n_agents):
        bindings[f"x.{i}"] = rng.normal(size=(rows, dims.input_dim))
        bindings[f"onehot.{i}"] = one_hot(rng.integers(dims.n_actions, size=rows), dims.n_actions)
    assert_matches_fd(b.build(), loss, bindings, tol=1e-4)


def test_probe_gradient_on_intermediate_and_leaf():
    b = GraphBuilder()
    x = b.probe(b.const("x"), "x")
    h = b.probe(b.mul(x, b.param("w")), "h")
    loss = b.sum(b.mul(h, h))
    bindings = {"x": np.array([[1.0, 2.0]]), "w": np.array([[3.0, -1.0]])}
    report = backward(b.build(), loss, bindings)
    h_value = np.array([[3.0, -2.0]])
    np.testing.assert_allclose(probe_gradient(report, "h"), 2 * h_value)
    np.testing.assert_allclose(probe_gradient(report, "x"), 2 * h_value * bindings["w"])
    np.testing.assert_allclose(report.params["w"], 2 * h_value * bindings["x"])


def test_unknown_probe_raises():
    b = GraphBuilder()
    loss = b.sum(b.param("w"))
    report = backward(b.build(), loss, {"w": np.ones((1, 2))})
    with pytest.raises(UnknownProbeError):
        probe_gradient(report, "missing")


def test_abs_derivative_at_zero_is_zero():
    b = GraphBuilder()
    loss = b.sum(b.abs(b.param("w")))
    report = backward(b.build(), loss, {"w": np.array([[0.0, 2.0, -3.0]])})
    np.testing.assert_array_equal(report.params["w"], [[0.0, 1.0, -1.0]])


def test_unreached_parameter_gets_zero_gradient():
    b = GraphBuilder()
    b.param("unused")
    loss = b.sum(b.param("w"))
    report = backward(b.build(), loss, {"w": np.ones((2, 2)), "unused": np.ones(3)})
    np.testing.assert_array_equal(report.params["unused"], np.zeros(3))
    np.testing.assert_array_equal(report.params["w"], np.ones((2, 2)))


def test_full_sum_keeps_dimensions():
    b = GraphBuilder()
    total = b.sum(b.const("x"))
    values = forward(b.build(), {"x": np.ones((2, 3))})
    assert values[total].shape == (1, 1)
    assert values[total].item() == 6.0


def test_missing_binding_raises():
    b = GraphBuilder()
    b.sum(b.add(b.param("w"), b.const("x")))
    with pytest.raises(UnboundLeafError):
        forward(b.build(), {"w": np.ones(2)})


def test_incompatible_shapes_raise_shape_error():
    b = GraphBuilder()
    b.matmul(b.const("a"), b.const("b"))
    with pytest.raises(ShapeError):
        forward(b.build(), {"a": np.ones((2, 3)), "b": np.ones((2, 3))})


def test_duplicate_leaf_names_rejected():
    b = GraphBuilder()
    b.param("w")
    b.param("w")
    with pytest.raises(GraphError):
        b.build()


def test_out_of_order_graph_rejected():
    nodes = [Node("leaf", name="a", kind=diffcore.LeafKind.CONST), Node("relu", (1,))]
    with pytest.raises(GraphError):
        diffcore.Graph(nodes)


def test_non_scalar_loss_rejected():
    b = GraphBuilder()
    y = b.relu(b.param("w"))
    with pytest.raises(GraphError):
        backward(b.build(), y, {"w": np.ones((2, 2))})


def test_checked_mode_rejects_non_finite_bindings():
    b = GraphBuilder()
    b.sum(b.const("x"))
    with pytest.raises(NonFiniteError):
        forward(b.build(), {"x": np.array([1.0, np.nan])})
    values = forward(b.build(), {"x": np.array([1.0, np.nan])}, checked=False)
    assert np.isnan(values[-1]).all()


def test_graph_is_reusable_across_batch_sizes():
    b = GraphBuilder()
    loss = b.sum(b.relu(b.matmul(b.const("x"), b.param("w"))))
    graph = b.build()
    w = np.ones((2, 1))
    small = forward(graph, {"x": np.ones((1, 2)), "w": w})[loss]
    large = forward(graph, {"x": np.ones((5, 2)), "w": w})[loss]
    assert small.item() == 2.0
    assert large.item() == 10.0


def _two_layer(b, x, prefix):
    hidden = b.relu(b.linear(x, b.param(f"{prefix}.w1"), b.param(f"{prefix}.b1")))
    return b.linear(hidden, b.param(f"{prefix}.w2"), b.param(f"{prefix}.b2"))


def _two_layer_bindings(rng, prefix, width=4):
    return {
        f"{prefix}.w1": rng.normal(size=(3, width)),
        f"{prefix}.b1": rng.normal(size=(width,)),
        f"{prefix}.w2": rng.normal(size=(width, 2)),
        f"{prefix}.b2": rng.normal(size=(2,)),
    }


@given(seed=seeds, a=st.floats(-3.0, 3.0), c=st.floats(-3.0, 3.0))
@settings(max_examples=100)
def test_backward_is_linear_in_the_loss(seed, a, c):
    rng = np.random.default_rng(seed)
    b = GraphBuilder()
    x = b.const("x")
    out = _two_layer(b, x, "net")
    f = b.sum(b.mul(out, b.const("m")))
    g = b.sum(b.sqerr(b.elu(out), b.const("y")))
    combined = b.add(b.mul(b.literal(a), f), b.mul(b.literal(c), g))
    graph = b.build()
    bindings = {
        **_two_layer_bindings(rng, "net"),
        "x": rng.normal(size=(6, 3)),
        "m": rng.normal(size=(6, 2)),
        "y": rng.normal(size=(6, 2)),
    }
    on_f, on_g = backward(graph, f, bindings), backward(graph, g, bindings)
    report = backward(graph, combined, bindings)
    assert report.loss == pytest.approx(a * on_f.loss + c * on_g.loss, abs=1e-9)
    for name in graph.params:
        expected = a * on_f.params[name] + c * on_g.params[name]
        np.testing.assert_allclose(report.params[name], expected, rtol=1e-9, atol=1e-9)


@given(seed=seeds)
@settings(max_examples=50)
def test_repeated_evaluation_is_bit_identical(seed):
    rng = np.random.default_rng(seed)
    b = GraphBuilder()
    out = _two_layer(b, b.const("x"), "net")
    loss = b.sum(b.sqerr(out, b.const("y")))
    graph = b.build()
    bindings = {**_two_layer_bindings(rng, "net"), "x": rng.normal(size=(6, 3)), "y": rng.normal(size=(6, 2))}
    first_values, second_values = forward(graph, bindings), forward(graph, bindings)
    for left, right in zip(first_values, second_values):
        np.testing.assert_array_equal(left, right)
    first, second = backward(graph, loss, bindings), backward(graph, loss, bindings)
    assert first.loss == second.loss
    for name in graph.params:
        np.testing.assert_array_equal(first.params[name], second.params[name])
