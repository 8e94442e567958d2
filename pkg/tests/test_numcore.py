import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lapobench.numcore import (
    AdamState, Gradient, Layer, Network, adam_step, argmax_smallest, backward, categorical_entropy,
    entropy_from_logits, finite_difference_gradient, forward, gradient_check, one_hot,
    relative_error, relaxed_categorical_sample, softmax, softmax_backward,
)


def test_identity_layer_passes_input_through():
    net = Network([Layer(np.eye(2), np.zeros(2), "identity")])
    assert np.allclose(forward(net, np.array([0.3, 0.7])), [0.3, 0.7])


def test_zero_weights_output_bias():
    net = Network([Layer(np.zeros((3, 2)), np.array([0.1, -0.4]), "identity")])
    assert np.array_equal(forward(net, np.array([5.0, -2.0, 1.0])), [0.1, -0.4])


def test_seeded_network_is_bit_reproducible():
    x = np.array([0.2, 0.9])
    a = Network.mlp(2, [16], 2, seed=11)(x)
    b = Network.mlp(2, [16], 2, seed=11)(x)
    assert np.array_equal(a, b)


def test_dimension_mismatch_raises():
    net = Network.mlp(2, [4], 1, seed=0)
    with pytest.raises(ValueError):
        net(np.zeros(3))


def test_layers_must_chain():
    with pytest.raises(ValueError):
        Network([Layer(np.zeros((2, 3)), np.zeros(3)), Layer(np.zeros((4, 1)), np.zeros(1))])


def test_unknown_activation_rejected():
    with pytest.raises(ValueError):
        Layer(np.zeros((1, 1)), np.zeros(1), "relu")


def test_linear_layer_gradient_is_outer_product():
    rng = np.random.default_rng(0)
    net = Network([Layer(rng.normal(size=(3, 2)), rng.normal(size=2), "identity")])
    x, u = rng.normal(size=3), rng.normal(size=2)
    net(x)
    g = backward(net, u)
    assert np.allclose(g.weights[0], np.outer(x, u))
    assert np.allclose(g.biases[0], u)
    assert np.allclose(g.input, net.layers[0].weight @ u)


def test_backward_without_forward_raises():
    with pytest.raises(RuntimeError):
        Network.mlp(2, [3], 1, seed=0).backward(np.ones(1))


def test_frozen_layer_gets_zero_gradient():
    net = Network.mlp(2, [5], 2, seed=3)
    net.layers[0].frozen = True
    net(np.array([[0.1, 0.2], [0.3, 0.4]]))
    g = net.backward(np.ones((2, 2)))
    assert not g.weights[0].any() and not g.biases[0].any()
    assert g.weights[1].any()


def test_predict_preserves_recorded_tape():
    net = Network.mlp(2, [4], 1, seed=0)
    x = np.array([[0.5, 0.5]])
    net.forward(x)
    first = net.backward(np.ones((1, 1)))
    net.predict(np.zeros((7, 2)))
    second = net.backward(np.ones((1, 1)))
    assert all(np.array_equal(a, b) for a, b in zip(first.arrays(), second.arrays()))


@pytest.mark.parametrize("dims,acts", [
    ([2, 16, 2], ["tanh", "sigmoid"]),
    ([4, 8, 8, 3], ["tanh", "sigmoid", "identity"]),
    ([6, 5], ["sigmoid"]),
])
def test_gradient_matches_central_differences(dims, acts):
    for seed in range(5):
        net = Network.init(dims, acts, seed)
        x = np.random.default_rng(seed).uniform(size=(4, dims[0]))
        assert gradient_check(net, x, seed) <= 1e-4


def test_input_gradient_matches_central_differences():
    net = Network.mlp(3, [6], 2, seed=5, out_act="sigmoid")
    x = np.array([0.2, -0.3, 0.8])
    w = np.array([1.5, -0.5])
    net(x)
    analytic = net.backward(w).input
    h = 1e-5
    numeric = np.array([(net.predict(x + h * e) @ w - net.predict(x - h * e) @ w) / (2 * h) for e in np.eye(3)])
    assert relative_error(analytic, numeric).max() <= 1e-6


def test_finite_difference_leaves_parameters_untouched():
    net = Network.mlp(2, [3], 1, seed=0)
    before = [p.copy() for p in net.parameters()]
    finite_difference_gradient(net, lambda n: float(n.predict(np.ones(2)).sum()))
    assert all(np.array_equal(a, b) for a, b in zip(before, net.parameters()))


def test_categorical_entropy_reference_values():
    assert categorical_entropy([1.0, 0.0, 0.0, 0.0]) == 0.0
    assert abs(categorical_entropy([0.25] * 4) - np.log(4)) <= 1e-12
    assert abs(categorical_entropy([0.5, 0.5, 0.0, 0.0]) - np.log(2)) <= 1e-12


@pytest.mark.parametrize("bad", [[0.5, 0.6], [1.2, -0.2], [0.3, 0.3]])
def test_categorical_entropy_rejects_non_simplex(bad):
    with pytest.raises(ValueError):
        categorical_entropy(bad)


simplex_rows = arrays(np.float64, st.integers(2, 10), elements=st.floats(0.0, 1.0)).filter(
    lambda a: a.sum() > 1e-3).map(lambda a: a / a.sum())


@given(simplex_rows)
def test_entropy_bounded_by_log_dimension(p):
    h = categorical_entropy(p)
    assert -1e-12 <= h <= np.log(p.size) + 1e-12


@given(arrays(np.float64, st.integers(2, 8), elements=st.floats(-30, 30)))
def test_entropy_from_logits_agrees(logits):
    assert abs(entropy_from_logits(logits) - categorical_entropy(softmax(logits))) <= 1e-9


def test_relaxed_sample_sharp_at_low_temperature():
    rng = np.random.default_rng(0)
    hits = sum(relaxed_categorical_sample(np.array([10.0, 0.0, 0.0]), 0.1, rng)[0] > 0.99 for _ in range(10_000))
    assert hits / 10_000 >= 0.99


def test_relaxed_sample_mean_uniform_for_equal_logits():
    samples = relaxed_categorical_sample(np.zeros((10_000, 4)), 1.0, 3)
    assert np.abs(samples.mean(axis=0) - 0.25).max() <= 0.02


@settings(max_examples=50)
@given(arrays(np.float64, st.integers(2, 8), elements=st.floats(-20, 20)),
       st.floats(0.05, 5.0), st.integers(0, 2**31))
def test_relaxed_sample_in_open_simplex(logits, temperature, seed):
    s = relaxed_categorical_sample(logits, temperature, seed)
    assert abs(s.sum() - 1.0) <= 1e-9
    assert np.all(s >= 0)


def test_relaxed_sample_rejects_nonpositive_temperature():
    for t in (0.0, -1.0):
        with pytest.raises(ValueError):
            relaxed_categorical_sample(np.zeros(3), t, 0)


def test_softmax_backward_matches_differences():
    z = np.array([0.3, -1.2, 2.0])
    u = np.array([1.0, 2.0, -0.5])
    h = 1e-6
    numeric = [(softmax(z + h * e) @ u - softmax(z - h * e) @ u) / (2 * h) for e in np.eye(3)]
    assert np.allclose(softmax_backward(softmax(z), u), numeric, atol=1e-8)


def test_adam_zero_gradient_keeps_parameters():
    net = Network.mlp(2, [3], 1, seed=0)
    before = [p.copy() for p in net.parameters()]
    zero = Gradient([np.zeros_like(l.weight) for l in net.layers], [np.zeros_like(l.bias) for l in net.layers])
    adam_step(net, zero, AdamState.for_network(net), lr=0.1)
    assert all(np.array_equal(a, b) for a, b in zip(before, net.parameters()))


def test_adam_first_step_moves_by_lr():
    net = Network([Layer(np.array([[1.0]]), np.zeros(1), "identity")])
    g = Gradient([np.array([[0.7]])], [np.zeros(1)])
    adam_step(net, g, AdamState.for_network(net), lr=0.01)
    # bias-corrected first step is lr * g / (|g| + eps)
    assert abs(net.layers[0].weight[0, 0] - (1.0 - 0.01 * 0.7 / (0.7 + 1e-8))) <= 1e-15


def test_adam_rejects_nonfinite_gradient():
    net = Network.mlp(2, [3], 1, seed=0)
    before = [p.copy() for p in net.parameters()]
    state = AdamState.for_network(net)
    bad = Gradient([np.full_like(l.weight, np.nan) for l in net.layers], [np.zeros_like(l.bias) for l in net.layers])
    adam_step(net, bad, state, lr=0.1)
    assert state.rejected == 1 and state.t == 0
    assert all(np.array_equal(a, b) for a, b in zip(before, net.parameters()))


def test_adam_trajectories_reproducible():
    def run():
        net = Network.mlp(2, [4], 1, seed=9)
        state = AdamState.for_network(net)
        x = np.random.default_rng(0).uniform(size=(8, 2))
        for _ in range(20):
            net(x)
            adam_step(net, net.backward(np.ones((8, 1))), state, 1e-2)
        return net.parameters()
    assert all(np.array_equal(a, b) for a, b in zip(run(), run()))


def test_one_hot_and_tie_rule():
    assert np.array_equal(one_hot([2, 0], 3), [[0, 0, 1], [1, 0, 0]])
    assert argmax_smallest(np.array([[0.4, 0.4, 0.2]]))[0] == 0
