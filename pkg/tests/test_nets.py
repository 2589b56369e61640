import numpy as np
import pytest

from patconv.nets import (Adam, ConvLayer, DenseLayer, TinyNet,
                          conv_forward_batch, train)
from patconv.synth import build_toy_net, two_blob_dataset
from patconv.tensors import ShapeError, central_difference


def small_net(seed=0, loss="softmax_ce"):
    rng = np.random.default_rng(seed)
    convs = [ConvLayer(rng.normal(0, 0.4, size=(3, 1, 3, 3))),
             ConvLayer(rng.normal(0, 0.4, size=(2, 3, 3, 3)))]
    feat = 2 * 2 * 2
    fc = DenseLayer(rng.normal(0, 0.4, size=(2, feat)), rng.normal(0, 0.1, size=2))
    return TinyNet(convs, fc, input_shape=(1, 6, 6), loss_kind=loss)


def test_forward_shapes_chain():
    net = small_net()
    x = np.zeros((5, 1, 6, 6))
    out, _ = net.forward(x)
    assert out.shape == (5, 2)


def test_bad_chaining_rejected():
    with pytest.raises(ShapeError):
        TinyNet([ConvLayer(np.zeros((3, 2, 3, 3)))], None, input_shape=(1, 6, 6))


def test_conv_forward_matches_scalar_loops():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    got = conv_forward_batch(x, w, stride=1)
    want = np.zeros_like(got)
    for n in range(2):
        for j in range(4):
            for y in range(3):
                for xx in range(3):
                    acc = 0.0
                    for c in range(3):
                        for p in range(3):
                            for q in range(3):
                                acc += x[n, c, y + p, xx + q] * w[j, c, p, q]
                    want[n, j, y, xx] = acc
    np.testing.assert_allclose(got, want, rtol=1e-12)


@pytest.mark.parametrize("loss", ["softmax_ce", "mse"])
def test_backprop_matches_central_difference(loss):
    rng = np.random.default_rng(3)
    net = small_net(seed=3, loss=loss)
    x = rng.normal(size=(4, 1, 6, 6))
    if loss == "softmax_ce":
        y = rng.integers(0, 2, size=4)
    else:
        y = rng.normal(size=(4, 2))
    _, grads = net.loss_and_grads(x, y)
    params = net.parameters()
    for p, grad in zip(params, grads):
        def loss_at(values, p=p):
            saved = p.copy()
            p[...] = values
            value = net.loss(x, y)
            p[...] = saved
            return value

        numeric = central_difference(loss_at, p, eps=1e-5)
        denom = np.maximum(np.abs(numeric), 1e-6)
        assert np.max(np.abs(grad - numeric) / denom) < 1e-3


def test_adam_minimizes_quadratic():
    target = np.array([1.0, -2.0, 0.5])
    p = np.zeros(3)
    opt = Adam([p], lr=0.05)
    for _ in range(500):
        opt.step([2.0 * (p - target)])
    np.testing.assert_allclose(p, target, atol=1e-3)


def test_training_learns_the_toy_task():
    x, y = two_blob_dataset(192, seed=11)
    net = build_toy_net(seed=12)
    train(net, x, y, epochs=25, lr=1e-3, batch_size=32, seed=13)
    assert net.accuracy(x, y) >= 0.95


def test_grad_mask_freezes_weights():
    net = small_net(seed=5)
    x, y = two_blob_dataset(32, seed=5, size=6)
    mask0 = np.zeros_like(net.convs[0].weights)
    masks = [mask0, None, None, None]
    before = net.convs[0].weights.copy()
    train(net, x, y, epochs=2, lr=1e-2, batch_size=16, seed=6, grad_mask=masks)
    np.testing.assert_array_equal(net.convs[0].weights, before)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises():
    net = small_net(seed=7)
    net.convs[0].weights[...] = np.inf
    x, y = two_blob_dataset(8, seed=7, size=6)
    with pytest.raises(FloatingPointError):
        net.loss_and_grads(x, y)


def test_weight_tensor_export_shapes():
    net = build_toy_net(seed=1)
    tensors = net.to_weight_tensors()
    assert [t.shape.in_channels for t in tensors] == [1, 6]
    assert [t.shape.out_channels for t in tensors] == [6, 8]
    assert tensors[0].shape.input_h == 8
    assert tensors[1].shape.input_h == 6
    assert all(np.all(t.bias == 0) for t in tensors)
