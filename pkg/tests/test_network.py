import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from protosanity.errors import InvalidArgumentError, InvalidStateError, UnsupportedOperationError
from protosanity.network import (
    AddBias,
    Conv2d,
    Layer,
    MaxPool2d,
    Network,
    ReLU,
    analytic_receptive_field,
    build_network,
    forward,
    input_gradient,
    parameter_gradients,
    receptive_field_params,
)

from . import oracles

ZERO, ONE = (0.0,), (1.0,)


def tiny_net(rng, bias=True, channels=(4, 6), size=16):
    net = build_network(channels=channels, input_shape=(3, size, size), bias=bias, rng=rng)
    for layer in net.layers:
        if getattr(layer, "bias", None) is not None:
            layer.bias[:] = rng.normal(0, 0.1, size=layer.bias.shape)
    return net


def test_identity_conv_returns_normalised_image():
    net = Network([Conv2d(np.ones((1, 1, 1, 1)))], input_shape=(1, 5, 5), mean=(0.3,), std=(0.5,))
    x = np.random.default_rng(0).random((1, 5, 5))
    feats, _ = forward(net, x)
    assert_allclose(feats, (x - 0.3) / 0.5)


def test_conv_forward_matches_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        c, o, k = rng.integers(1, 4), rng.integers(1, 4), int(rng.choice([1, 3, 5]))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 3))
        h = int(rng.integers(k, 9))
        x = rng.normal(size=(c, h, h))
        w = rng.normal(size=(o, c, k, k))
        b = rng.normal(size=o) if rng.random() < 0.5 else None
        out, _ = Conv2d(w, b, stride, pad).forward(x[None])
        assert_allclose(out[0], oracles.conv2d(x, w, b, stride, pad), atol=1e-12)


def test_conv_on_known_5x5_input():
    x = np.arange(25.0).reshape(1, 1, 5, 5)
    kernel = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=float).reshape(1, 1, 3, 3)
    out, _ = Conv2d(kernel).forward(x)
    # the Laplacian of a linear ramp vanishes in the interior
    assert_array_equal(out, np.zeros((1, 1, 3, 3)))


def test_maxpool_matches_loop_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        x = rng.normal(size=(2, int(rng.integers(2, 9)), int(rng.integers(2, 9))))
        out, _ = MaxPool2d(2, 2).forward(x[None])
        assert_allclose(out[0], oracles.maxpool(x, 2, 2))


def test_maxpool_ties_route_to_first_index():
    x = np.ones((1, 1, 2, 2))
    pool = MaxPool2d(2, 2)
    out, cache = pool.forward(x)
    grad, _ = pool.backward(np.ones_like(out), cache)
    assert_array_equal(grad[0, 0], [[1, 0], [0, 0]])


def test_relu_zeroes_negatives_only():
    x = np.array([-2.0, -0.0, 0.5, 3.0]).reshape(1, 1, 2, 2)
    out, _ = ReLU().forward(x)
    assert_array_equal(out.ravel(), [0, 0, 0.5, 3.0])


def test_forward_rejects_wrong_shape():
    net = build_network(input_shape=(3, 16, 16))
    with pytest.raises(InvalidArgumentError):
        forward(net, np.zeros((3, 8, 8)))


def test_non_positive_std_rejected():
    with pytest.raises(InvalidArgumentError):
        Network([ReLU()], input_shape=(1, 4, 4), mean=ZERO, std=ZERO)


def test_non_finite_weights_rejected():
    with pytest.raises(InvalidArgumentError):
        Conv2d(np.full((1, 1, 3, 3), np.nan))


def test_trace_has_one_entry_per_layer():
    net = build_network(input_shape=(3, 16, 16))
    _, trace = forward(net, np.zeros((3, 16, 16)))
    assert len(trace.outputs) == len(net.layers) == len(trace.caches)


def test_default_backbone_geometry():
    net = build_network()
    feats, _ = forward(net, np.zeros((3, 32, 32)))
    assert feats.shape == (32, 4, 4) == net.output_dims


# --- gradients -------------------------------------------------------------


def _score(net, x, seed):
    feats, _ = forward(net, x)
    return float(np.sum(feats * seed))


@pytest.mark.parametrize("bias", [False, True])
def test_input_gradient_matches_central_differences(bias):
    rng = np.random.default_rng(3)
    net = tiny_net(rng, bias)
    x = rng.random((3, 16, 16))
    feats, trace = forward(net, x)
    seed = rng.normal(size=feats.shape)
    grad = input_gradient(net, trace, seed)
    for _ in range(30):
        idx = tuple(int(rng.integers(s)) for s in x.shape)
        fd = oracles.central_difference(lambda z: _score(net, z, seed), x, idx, h=1e-5)
        assert oracles.relative_error(grad[idx], fd) < 1e-4 or abs(grad[idx] - fd) < 1e-9


def test_parameter_gradients_match_central_differences():
    rng = np.random.default_rng(4)
    net = tiny_net(rng)
    x = rng.random((3, 16, 16))
    feats, trace = forward(net, x)
    seed = rng.normal(size=feats.shape)
    grads = parameter_gradients(net, trace, seed)
    params = net.parameters()
    for _ in range(20):
        li, name, arr = params[int(rng.integers(len(params)))]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        original = arr[idx]

        def at(v, arr=arr, idx=idx):
            arr[idx] = v
            return _score(net, x, seed)

        fd = (at(original + 1e-6) - at(original - 1e-6)) / 2e-6
        arr[idx] = original
        assert oracles.relative_error(grads[li][name][idx], fd) < 1e-4 or abs(grads[li][name][idx] - fd) < 1e-9


def test_single_1x1_conv_weight_gradient_is_input():
    net = Network([Conv2d(np.array([[[[2.0]]]]))], input_shape=(1, 1, 1), mean=ZERO, std=ONE)
    _, trace = forward(net, np.array([[[0.3]]]))
    grads = parameter_gradients(net, trace, np.ones((1, 1, 1)))
    assert grads[0]["weight"].item() == pytest.approx(0.3)


def test_zero_seed_gives_zero_gradients():
    rng = np.random.default_rng(5)
    net = tiny_net(rng)
    feats, trace = forward(net, rng.random((3, 16, 16)))
    assert not input_gradient(net, trace, np.zeros_like(feats)).any()
    for layer_grads in parameter_gradients(net, trace, np.zeros_like(feats)):
        for g in layer_grads.values():
            assert not g.any()


def test_linear_network_gradient_does_not_depend_on_input():
    rng = np.random.default_rng(6)
    net = Network([Conv2d(rng.normal(size=(2, 3, 3, 3)), None, 1, 1), Conv2d(rng.normal(size=(2, 2, 3, 3)))], (3, 8, 8))
    seed = rng.normal(size=net.output_dims)
    g1 = input_gradient(net, forward(net, rng.random((3, 8, 8)))[1], seed)
    g2 = input_gradient(net, forward(net, rng.random((3, 8, 8)))[1], seed)
    assert_allclose(g1, g2, atol=1e-12)


def test_bias_free_relu_net_is_homogeneous():
    rng = np.random.default_rng(7)
    net = build_network(channels=(4, 5), input_shape=(3, 16, 16), bias=False, rng=rng)
    x = rng.random((3, 16, 16))
    feats, trace = forward(net, x)
    seed = rng.normal(size=feats.shape)
    grad_norm = input_gradient(net, trace, seed) * net.std[:, None, None]
    total = float(np.sum(grad_norm * net.normalize(x[None])[0]))
    assert total == pytest.approx(float(np.sum(seed * feats)), rel=1e-5)


def test_stale_trace_is_rejected():
    rng = np.random.default_rng(8)
    net = tiny_net(rng)
    feats, trace = forward(net, rng.random((3, 16, 16)))
    other = net.copy()
    with pytest.raises(InvalidStateError):
        input_gradient(other, trace, np.ones_like(feats))
    with pytest.raises(InvalidArgumentError):
        input_gradient(net, trace, np.ones((1, 2, 2)))


def test_add_bias_layer_gradient():
    rng = np.random.default_rng(9)
    net = Network([Conv2d(rng.normal(size=(2, 3, 3, 3))), AddBias(np.array([0.5, -0.5])), ReLU()], (3, 6, 6))
    x = rng.random((3, 6, 6))
    feats, trace = forward(net, x)
    grads = parameter_gradients(net, trace, np.ones_like(feats))
    assert_allclose(grads[1]["bias"], (feats > 0).sum(axis=(1, 2)))


# --- receptive field -------------------------------------------------------


def _rf_extent(layers, shape=(3, 24, 24)):
    net = Network(layers, shape)
    rf = analytic_receptive_field(net)
    return rf, net


def test_single_conv_rf_is_3x3():
    rf, _ = _rf_extent([Conv2d(np.ones((1, 3, 3, 3)), None, 1, 1)])
    assert rf.size == 3 and rf.stride == 1
    assert tuple(rf.extents[5, 5]) == (3, 3)


def test_two_convs_rf_is_5x5():
    rf, _ = _rf_extent([Conv2d(np.ones((1, 3, 3, 3)), None, 1, 1), Conv2d(np.ones((1, 1, 3, 3)), None, 1, 1)])
    assert rf.size == 5


def test_conv_pool_conv_rf_matches_pixel_support():
    rng = np.random.default_rng(10)
    layers = [
        Conv2d(np.abs(rng.normal(size=(2, 3, 3, 3))), None, 1, 1),
        ReLU(),
        MaxPool2d(2, 2),
        Conv2d(np.abs(rng.normal(size=(2, 2, 3, 3))), None, 1, 1),
    ]
    net = Network(layers, (3, 16, 16), mean=(0, 0, 0), std=(1, 1, 1))
    rf = analytic_receptive_field(net)
    assert rf.stride == 2
    assert rf.size == 8

    def run(batch):
        return forward(net, batch)[0]

    for loc in [(3, 3), (4, 2)]:
        support = oracles.pixel_support(run, (3, 16, 16), loc, rng=rng)
        top, left, bottom, right = rf.box(*loc)
        expected = np.zeros_like(support)
        expected[top : bottom + 1, left : right + 1] = True
        assert_array_equal(support, expected)


def test_default_backbone_rf_matches_pixel_support_in_interior():
    rng = np.random.default_rng(11)
    net = build_network(channels=(2, 2, 2), input_shape=(3, 32, 32), bias=False, rng=rng, mean=(0, 0, 0), std=(1, 1, 1))
    for layer in net.layers:
        if isinstance(layer, Conv2d):
            layer.weight = np.abs(layer.weight)
    rf = analytic_receptive_field(net)

    def run(batch):
        return forward(net, batch)[0]

    support = oracles.pixel_support(run, (3, 32, 32), (2, 2), n_inputs=30, rng=rng)
    top, left, bottom, right = rf.box(2, 2)
    expected = np.zeros_like(support)
    expected[top : bottom + 1, left : right + 1] = True
    assert_array_equal(support, expected)


def test_rf_boxes_are_clipped_at_borders():
    net = build_network(input_shape=(3, 32, 32))
    rf = analytic_receptive_field(net)
    boxes = rf.boxes.reshape(-1, 4)
    assert boxes.min() >= 0 and boxes[:, 2:].max() <= 31
    assert rf.area_fraction(0, 0, (32, 32)) < rf.area_fraction(2, 2, (32, 32))


def test_rf_grows_with_depth():
    rng = np.random.default_rng(12)
    net = build_network(input_shape=(3, 32, 32), rng=rng)
    sizes = [receptive_field_params(net.layers[: i + 1])[0] for i in range(len(net.layers))]
    assert sizes == sorted(sizes)
    assert sizes[-1] > sizes[0]


def test_unknown_layer_kind_has_no_rf_rule():
    class Odd(Layer):
        kind = "odd"
        rf_params = None

    with pytest.raises(UnsupportedOperationError):
        receptive_field_params([Odd()])
