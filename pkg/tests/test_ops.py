import numpy as np
import pytest

from dgcn.ops import (
    BatchNormParams,
    Conv1x1Params,
    Conv3x3Params,
    DepthwiseConvParams,
    avg_pool,
    batchnorm,
    conv1x1,
    conv3x3,
    depthwise3x3_s2,
    gcn_layer,
    init_batchnorm,
    nearest_upsample,
)
from dgcn.tensor import RngState, ShapeError, Tensor, finite_diff_grad, rel_error


def _t(rng, shape, grad=False):
    return Tensor(rng.normal(shape, dtype=np.float64), requires_grad=grad)


def loop_conv3x3(x, w, b, stride=1):
    """Direct correlation oracle with zero padding 1."""
    din, h, wd = x.shape
    dout = w.shape[0]
    oh = (h + 2 - 3) // stride + 1
    ow = (wd + 2 - 3) // stride + 1
    xp = np.zeros((din, h + 2, wd + 2))
    xp[:, 1:-1, 1:-1] = x
    y = np.zeros((dout, oh, ow))
    for o in range(dout):
        for r in range(oh):
            for c in range(ow):
                acc = 0.0
                for i in range(din):
                    for u in range(3):
                        for v in range(3):
                            acc += w[o, i, u, v] * xp[i, r * stride + u, c * stride + v]
                y[o, r, c] = acc + (b[o] if b is not None else 0.0)
    return y


def test_conv1x1_is_per_pixel_matmul():
    rng = RngState(0)
    x = _t(rng, (3, 4, 5))
    p = Conv1x1Params(weight=_t(rng, (2, 3)), bias=_t(rng, (2,)))
    y = conv1x1(x, p).data
    for r in range(4):
        for c in range(5):
            expect = p.weight.data @ x.data[:, r, c] + p.bias.data
            assert np.max(np.abs(y[:, r, c] - expect)) < 1e-12


def test_conv1x1_identity_weight():
    rng = RngState(1)
    x = _t(rng, (3, 4, 4))
    p = Conv1x1Params(weight=Tensor(np.eye(3)))
    assert np.array_equal(conv1x1(x, p).data, x.data)


def test_conv3x3_matches_loop_oracle():
    rng = RngState(2)
    x = _t(rng, (3, 6, 5))
    p = Conv3x3Params(weight=_t(rng, (4, 3, 3, 3)), bias=_t(rng, (4,)))
    y = conv3x3(x, p).data
    expect = loop_conv3x3(x.data, p.weight.data, p.bias.data)
    assert np.max(np.abs(y - expect)) < 1e-12


def test_conv3x3_center_tap_is_identity():
    rng = RngState(3)
    x = _t(rng, (2, 5, 5))
    w = np.zeros((2, 2, 3, 3))
    w[0, 0, 1, 1] = 1.0
    w[1, 1, 1, 1] = 1.0
    y = conv3x3(x, Conv3x3Params(weight=Tensor(w))).data
    assert np.array_equal(y, x.data)


def test_conv3x3_gradients():
    rng = RngState(4)
    x = _t(rng, (2, 4, 4), grad=True)
    p = Conv3x3Params(weight=_t(rng, (3, 2, 3, 3), grad=True), bias=_t(rng, (3,), grad=True))
    conv3x3(x, p).sum().backward()
    for t in (x, p.weight, p.bias):
        fd = finite_diff_grad(lambda s, t=t: _swap_eval(t, s, lambda: conv3x3(x, p).sum()), t)
        assert rel_error(t.grad, fd.data) < 1e-6


def _swap_eval(target, probe, f):
    """Evaluate f with target.data temporarily replaced by probe.data."""
    saved = target.data
    target.data = probe.data
    try:
        return f()
    finally:
        target.data = saved


def test_depthwise_matches_loop_oracle():
    rng = RngState(5)
    x = _t(rng, (3, 6, 6))
    k = _t(rng, (3, 3, 3))
    y = depthwise3x3_s2(x, DepthwiseConvParams(weight=k)).data
    assert y.shape == (3, 3, 3)
    # per-channel loop oracle
    w4 = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w4[c, c] = k.data[c]
    expect = loop_conv3x3(x.data, w4, None, stride=2)
    assert np.max(np.abs(y - expect)) < 1e-12


def test_depthwise_odd_extent_ceil():
    rng = RngState(6)
    x = _t(rng, (1, 5, 7))
    y = depthwise3x3_s2(x, DepthwiseConvParams(weight=_t(rng, (1, 3, 3))))
    assert y.shape == (1, 3, 4)


def test_depthwise_gradients():
    rng = RngState(7)
    x = _t(rng, (2, 6, 6), grad=True)
    p = DepthwiseConvParams(weight=_t(rng, (2, 3, 3), grad=True))
    depthwise3x3_s2(x, p).sum().backward()
    for t in (x, p.weight):
        fd = finite_diff_grad(lambda s, t=t: _swap_eval(t, s, lambda: depthwise3x3_s2(x, p).sum()), t)
        assert rel_error(t.grad, fd.data) < 1e-6


def test_avg_pool_constant_and_hand_case():
    x = Tensor(np.full((2, 4, 4), 3.0))
    assert np.array_equal(avg_pool(x, 2).data, np.full((2, 2, 2), 3.0))
    x2 = Tensor(np.arange(4.0).reshape(1, 2, 2))
    assert np.allclose(avg_pool(x2, 2).data, [[[1.5]]])


def test_avg_pool_requires_divisibility():
    with pytest.raises(ShapeError):
        avg_pool(Tensor(np.ones((1, 5, 5))), 2)


def test_avg_pool_gradient_uniform():
    x = Tensor(RngState(8).normal((1, 4, 4), dtype=np.float64), requires_grad=True)
    avg_pool(x, 2).sum().backward()
    assert np.allclose(x.grad, np.full((1, 4, 4), 0.25))


def test_upsample_blocks_and_adjoint():
    x = Tensor(np.arange(4.0).reshape(1, 2, 2), requires_grad=True)
    y = nearest_upsample(x, 2)
    assert np.array_equal(y.data[0], [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])
    y.sum().backward()
    assert np.allclose(x.grad, np.full((1, 2, 2), 4.0))


def test_upsample_then_pool_is_identity():
    x = Tensor(RngState(9).normal((3, 4, 4), dtype=np.float64))
    back = avg_pool(nearest_upsample(x, 4), 4)
    assert np.max(np.abs(back.data - x.data)) < 1e-12


def test_batchnorm_training_normalizes():
    rng = RngState(10)
    x = _t(rng, (4, 8, 8))
    p = init_batchnorm(4, np.float64)
    y = batchnorm(x, p, training=True).data
    means = y.reshape(4, -1).mean(axis=1)
    stds = y.reshape(4, -1).std(axis=1)
    assert np.max(np.abs(means)) < 1e-12
    assert np.max(np.abs(stds - 1.0)) < 1e-4  # epsilon shifts the scale slightly


def test_batchnorm_running_stats_update():
    rng = RngState(11)
    x = _t(rng, (2, 4, 4))
    p = init_batchnorm(2, np.float64)
    batch_mean = x.data.reshape(2, -1).mean(axis=1)
    batch_var = x.data.reshape(2, -1).var(axis=1)
    batchnorm(x, p, training=True)
    assert np.allclose(p.running_mean, 0.1 * batch_mean)
    assert np.allclose(p.running_var, 0.9 * 1.0 + 0.1 * batch_var)
    # eval mode must not touch them
    before = p.running_mean.copy()
    batchnorm(x, p, training=False)
    assert np.array_equal(p.running_mean, before)


def test_batchnorm_eval_uses_running_stats():
    p = init_batchnorm(1, np.float64)
    p.running_mean = np.array([2.0])
    p.running_var = np.array([4.0])
    x = Tensor(np.full((1, 2, 2), 4.0))
    y = batchnorm(x, p, training=False).data
    assert np.max(np.abs(y - (4.0 - 2.0) / np.sqrt(4.0 + p.epsilon))) < 1e-12


def test_batchnorm_training_gradients():
    rng = RngState(12)
    x = _t(rng, (3, 4, 4), grad=True)
    p = init_batchnorm(3, np.float64)
    p.gamma.data = rng.normal((3,), dtype=np.float64)
    p.beta.data = rng.normal((3,), dtype=np.float64)
    w = _t(rng, (3, 4, 4))  # random weighting so the loss sees the normalization

    def loss():
        return batchnorm(x, p, training=True, update_running=False).mul(w).sum()

    loss().backward()
    for t in (x, p.gamma, p.beta):
        fd = finite_diff_grad(lambda s, t=t: _swap_eval(t, s, loss), t)
        assert rel_error(t.grad, fd.data) < 1e-5


def test_batchnorm_eval_gradients():
    rng = RngState(13)
    x = _t(rng, (2, 3, 3), grad=True)
    p = init_batchnorm(2, np.float64)
    p.running_mean = rng.normal((2,), dtype=np.float64)
    p.running_var = np.abs(rng.normal((2,), dtype=np.float64)) + 0.5
    w = _t(rng, (2, 3, 3))

    def loss():
        return batchnorm(x, p, training=False).mul(w).sum()

    loss().backward()
    fd = finite_diff_grad(lambda s: _swap_eval(x, s, loss), x)
    assert rel_error(x.grad, fd.data) < 1e-6


def test_gcn_layer_identity_adjacency():
    rng = RngState(14)
    x = _t(rng, (5, 4))
    w = _t(rng, (4, 4))
    a = Tensor(np.eye(5))
    y = gcn_layer(a, x, w)
    assert np.max(np.abs(y.data - x.data @ w.data)) < 1e-12


def test_gcn_layer_with_activation():
    rng = RngState(15)
    x = _t(rng, (4, 3))
    w = _t(rng, (3, 3))
    a = Tensor(np.eye(4))
    y = gcn_layer(a, x, w, sigma=lambda t: t.relu())
    assert np.min(y.data) >= 0.0
