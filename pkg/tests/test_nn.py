import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import kink_free_instance, numeric_grad, rel_error, small_net
from tlguard.nn import (SGD, Adadelta, Conv2D, Dense, Flatten, Network, ReLU, ShapeError, apply_gradients,
                        apply_masks, feature_distance, feature_loss_input_gradient, softmax_cross_entropy,
                        train_step)


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, f, oh, ow))
    for s in range(n):
        for o in range(f):
            for i in range(oh):
                for j in range(ow):
                    acc = b[o]
                    for ci in range(c):
                        for a in range(k):
                            for bb in range(k):
                                acc += w[o, ci, a, bb] * xp[s, ci, i * stride + a, j * stride + bb]
                    out[s, o, i, j] = acc
    return out


def test_identity_dense():
    net = Network([Dense(np.eye(2), np.zeros(2))], (2,))
    np.testing.assert_array_equal(net.forward(np.array([1.0, 2.0])), [1.0, 2.0])


def test_fully_masked_net_outputs_final_bias(net64, rng):
    for layer in net64.layers:
        if layer.has_params:
            layer.set_mask(np.zeros_like(layer.weight))
    out = net64.forward(rng.random((4, 1, 6, 6)))
    np.testing.assert_allclose(out, np.tile(net64.layers[-1].bias, (4, 1)))


def test_forward_matches_scalar_loops():
    rng = np.random.default_rng(5)
    conv = Conv2D(rng.normal(size=(2, 1, 3, 3)), rng.normal(size=2), stride=2, padding=1)
    head = Dense(rng.normal(size=(3, 18)), rng.normal(size=3))
    net = Network([conv, ReLU(), Flatten(), head], (1, 6, 6)).astype(np.float32)
    x = rng.random((2, 1, 6, 6)).astype(np.float32)
    h = np.maximum(naive_conv(x.astype(np.float64), conv.weight, conv.bias, 2, 1), 0).reshape(2, -1)
    expected = np.array([[sum(head.weight[o, i] * h[s, i] for i in range(18)) + head.bias[o]
                          for o in range(3)] for s in range(2)])
    np.testing.assert_allclose(net.forward(x), expected, atol=1e-5)


def test_forward_to_layer(net64, rng):
    x = rng.random((3, 1, 6, 6))
    np.testing.assert_allclose(net64.forward_to_layer(x, len(net64) - 1), net64.forward(x))
    relu_first = Network([ReLU(), Flatten(), Dense(np.ones((2, 36)), np.zeros(2))], (1, 6, 6))
    assert not relu_first.forward_to_layer(-rng.random((1, 6, 6)), 0).any()


def test_equal_features_give_equal_logits(net64, rng):
    k = 4
    h = net64.forward_to_layer(rng.random((1, 1, 6, 6)), k)
    a = net64.forward_from_layer(h.copy(), k)
    b = net64.forward_from_layer(h.copy(), k)
    np.testing.assert_array_equal(a, b)


def test_shape_errors(net64):
    with pytest.raises(ShapeError):
        net64.forward(np.zeros((1, 5, 5)))
    with pytest.raises(ValueError):
        net64.loss(np.zeros((1, 1, 6, 6)), [4])


@pytest.mark.parametrize("seed", range(4))
def test_parameter_and_input_gradients_match_finite_differences(seed):
    net, x, y = kink_free_instance(seed)
    _, grads, dx = net.loss_and_grads(x, y, input_grad=True)
    for i, layer in enumerate(net.layers):
        if not layer.has_params:
            continue
        for name in ("weight", "bias"):
            num = numeric_grad(lambda: net.loss(x, y), getattr(layer, name))
            assert rel_error(grads[i][name], num) < 1e-3, (i, name)
    num_x = numeric_grad(lambda: net.loss(x, y), x)
    assert rel_error(dx, num_x) < 1e-3


def test_masked_parameters_have_zero_gradient(net64, rng):
    for layer in net64.layers:
        if layer.has_params:
            layer.set_mask(np.zeros_like(layer.weight))
    grads, _ = net64.backward(rng.random((1, 6, 6)), 2)
    for i, g in grads.items():
        assert not g["weight"].any()
        if isinstance(net64.layers[i], Conv2D):
            assert not g["bias"].any()


def test_frozen_layers_get_no_gradients_and_never_move(net64, rng):
    net64.frozen = [True] * 5 + [False] * 3
    before = [l.weight.copy() for l in net64.layers if l.has_params]
    _, grads, _ = net64.loss_and_grads(rng.random((4, 1, 6, 6)), [1, 2, 3, 1])
    assert set(grads) == {5, 7}
    grads[0] = {"weight": np.ones_like(net64.layers[0].weight), "bias": np.ones(3)}
    apply_gradients(net64, grads, SGD(0.1))
    after = [l.weight for l in net64.layers if l.has_params]
    np.testing.assert_array_equal(before[0], after[0])
    np.testing.assert_array_equal(before[1], after[1])
    assert not np.array_equal(before[3], after[3])


def test_masked_weights_never_move(net64, rng):
    layer = net64.layers[5]
    mask = (rng.random(layer.weight.shape) > 0.5).astype(float)
    layer.set_mask(mask)
    before = layer.weight.copy()
    for _ in range(3):
        train_step(net64, rng.random((4, 1, 6, 6)), [1, 2, 3, 1], SGD(0.1))
    np.testing.assert_array_equal(layer.weight[mask == 0], before[mask == 0])


def test_set_mask_validates(net64):
    with pytest.raises(ValueError):
        net64.layers[0].set_mask(np.ones((2, 2)))
    with pytest.raises(ValueError):
        net64.layers[0].set_mask(np.full(net64.layers[0].weight.shape, 0.5))


def test_apply_masks_folds_and_preserves_output(net64, rng):
    net64.layers[0].set_mask((rng.random(net64.layers[0].weight.shape) > 0.3).astype(float))
    x = rng.random((3, 1, 6, 6))
    folded = apply_masks(net64)
    assert folded.layers[0].mask is None
    np.testing.assert_allclose(folded.forward(x), net64.forward(x))


class TestFeatureGradient:
    def test_zero_at_target(self, net64, rng):
        x = rng.random((1, 6, 6))
        tgt = net64.forward_to_layer(x, 5)
        d, g = feature_loss_input_gradient(net64, x, tgt, 5)
        assert d == 0 and not g.any()

    @pytest.mark.parametrize("metric", ["sq_l2", "l2", "l1"])
    def test_finite_differences(self, net64, rng, metric):
        x = rng.random((1, 6, 6))
        tgt = net64.forward_to_layer(rng.random((1, 6, 6)), 6)
        _, g = feature_loss_input_gradient(net64, x, tgt, 6, metric)
        num = numeric_grad(lambda: feature_loss_input_gradient(net64, x, tgt, 6, metric)[0], x, h=1e-5)
        assert rel_error(g, num) < 1e-3

    def test_scale_is_linear(self, net64, rng):
        x = rng.random((1, 6, 6))
        tgt = net64.forward_to_layer(rng.random((1, 6, 6)), 3)
        _, g1 = feature_loss_input_gradient(net64, x, tgt, 3)
        _, g3 = feature_loss_input_gradient(net64, x, tgt, 3, scale=3.0)
        np.testing.assert_allclose(g3, 3 * g1)

    def test_unknown_metric(self):
        with pytest.raises(ValueError):
            feature_distance(np.zeros((1, 2)), np.ones((1, 2)), "cosine")


class TestOptimisers:
    def test_zero_learning_rate_leaves_parameters(self, net64, rng):
        before = [l.weight.copy() for l in net64.layers if l.has_params]
        train_step(net64, rng.random((4, 1, 6, 6)), [1, 2, 3, 1], SGD(0.0))
        for a, l in zip(before, [l for l in net64.layers if l.has_params]):
            np.testing.assert_array_equal(a, l.weight)

    def test_sgd_quadratic_step(self):
        w = np.array(0.0)
        w = w + SGD(0.1, 0.9).delta("w", 2 * (w - 3))
        assert w == pytest.approx(0.6)

    def test_adadelta_decreases_quadratic_monotonically(self):
        opt, w = Adadelta(0.95, 1e-6, 1.0), np.array(0.0)
        losses = []
        for _ in range(50):
            w = w + opt.delta("w", 2 * (w - 3))
            losses.append(float((w - 3) ** 2))
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_adadelta_first_step_by_hand(self):
        g = 4.0
        eg = 0.05 * g * g
        step = np.sqrt(1e-6) / np.sqrt(eg + 1e-6) * g
        assert Adadelta().delta("k", np.array(g)) == pytest.approx(-step)

    def test_empty_batch(self, net64):
        with pytest.raises(ValueError):
            train_step(net64, np.zeros((0, 1, 6, 6)), np.zeros(0, int), SGD())


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(2, 6), st.integers(0, 2**31))
def test_cross_entropy_gradient_rows_sum_to_zero(n, k, seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(n, k)) * 10
    labels = rng.integers(1, k + 1, size=n)
    loss, g = softmax_cross_entropy(logits, labels)
    assert loss >= 0
    np.testing.assert_allclose(g.sum(axis=1), 0, atol=1e-12)


def test_prediction_ties_go_to_smallest_label():
    net = Network([Dense(np.zeros((4, 2)), np.array([0.0, 1.0, 1.0, 0.0]))], (2,))
    assert net.predict(np.ones(2)) == 2
