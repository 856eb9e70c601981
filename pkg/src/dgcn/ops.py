"""Convolution, pooling, resampling and normalization primitives.

All feature maps are channel-first (D, H, W).  Forward functions build
autodiff graph nodes; the heavier kernels (3x3 convs) carry hand-written
backward passes on top of an im2col formulation so that the inner loops
stay inside BLAS.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, from_op


@dataclass
class Conv1x1Params:
    weight: Tensor  # (D_out, D_in)
    bias: Tensor | None = None  # (D_out,)

    @property
    def d_in(self):
        return self.weight.shape[1]

    @property
    def d_out(self):
        return self.weight.shape[0]


@dataclass
class Conv3x3Params:
    """Standard cross-channel 3x3 conv, stride 1, zero padding 1."""

    weight: Tensor  # (D_out, D_in, 3, 3)
    bias: Tensor | None = None


@dataclass
class DepthwiseConvParams:
    """Per-channel 3x3 kernels, stride fixed at 2, zero padding 1, no bias."""

    weight: Tensor  # (D, 3, 3)


@dataclass
class BatchNormParams:
    gamma: Tensor  # (D,)
    beta: Tensor  # (D,)
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    momentum: float = 0.1
    epsilon: float = 1e-5

    def __post_init__(self):
        d = self.gamma.shape[0]
        if self.running_mean is None:
            self.running_mean = np.zeros(d, dtype=self.gamma.dtype)
        if self.running_var is None:
            self.running_var = np.ones(d, dtype=self.gamma.dtype)


def conv1x1(x, p):
    """Per-pixel linear map over channels: out[:,h,w] = W x[:,h,w] + b."""
    d, h, w = _chw(x)
    if d != p.d_in:
        raise ShapeError(f"conv1x1: input has {d} channels, weight expects {p.d_in}")
    xm = x.reshape(d, h * w)
    ym = p.weight.matmul(xm)
    if p.bias is not None:
        ym = add_channel_bias(ym, p.bias)
    return ym.reshape(p.d_out, h, w)


def add_channel_bias(xm, b):
    """Add a per-row bias to a (D, N) matrix without broadcasting in the graph."""
    if xm.shape[0] != b.shape[0]:
        raise ShapeError("bias length does not match channel count")
    out = from_op(xm.data + b.data[:, None], (xm, b))

    def bwd(g):
        if xm.requires_grad:
            xm.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=1))

    out._backward_fn = bwd
    return out


_OFFSETS = [(i, j) for i in range(3) for j in range(3)]


def _pad1(x):
    d, h, w = x.shape
    xp = np.zeros((d, h + 2, w + 2), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    return xp


def _im2col3(xp, h, w, stride=1):
    """(D, H+2, W+2) padded map -> (D*9, OH*OW) patch matrix."""
    d = xp.shape[0]
    oh = (h + 2 - 3) // stride + 1
    ow = (w + 2 - 3) // stride + 1
    cols = np.empty((d, 9, oh, ow), dtype=xp.dtype)
    for k, (i, j) in enumerate(_OFFSETS):
        cols[:, k] = xp[:, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride]
    return cols.reshape(d * 9, oh * ow), oh, ow


def _col2im3(dcols, d, h, w, stride=1):
    """Scatter-add the im2col adjoint back onto the padded input."""
    oh = (h + 2 - 3) // stride + 1
    ow = (w + 2 - 3) // stride + 1
    dc = dcols.reshape(d, 9, oh, ow)
    dxp = np.zeros((d, h + 2, w + 2), dtype=dcols.dtype)
    for k, (i, j) in enumerate(_OFFSETS):
        dxp[:, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride] += dc[:, k]
    return dxp


def conv3x3(x, p):
    """3x3 cross-channel conv, stride 1, zero padding 1."""
    d, h, w = _chw(x)
    d_out, d_in = p.weight.shape[0], p.weight.shape[1]
    if d != d_in:
        raise ShapeError(f"conv3x3: input has {d} channels, weight expects {d_in}")
    xp = _pad1(x.data)
    cols, oh, ow = _im2col3(xp, h, w, stride=1)
    wm = p.weight.data.reshape(d_out, d_in * 9)
    ym = wm @ cols
    if p.bias is not None:
        ym = ym + p.bias.data[:, None]
    parents = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)
    out = from_op(ym.reshape(d_out, oh, ow), parents)

    def bwd(g):
        gm = g.reshape(d_out, oh * ow)
        if p.weight.requires_grad:
            p.weight.accumulate_grad((gm @ cols.T).reshape(p.weight.shape))
        if p.bias is not None and p.bias.requires_grad:
            p.bias.accumulate_grad(gm.sum(axis=1))
        if x.requires_grad:
            dxp = _col2im3(wm.T @ gm, d_in, h, w, stride=1)
            x.accumulate_grad(dxp[:, 1:-1, 1:-1])

    out._backward_fn = bwd
    return out


def depthwise3x3_s2(x, p):
    """Channelwise strided 3x3 correlation; halves each spatial extent."""
    d, h, w = _chw(x)
    if p.weight.shape[0] != d:
        raise ShapeError("depthwise kernel count must equal channel count")
    if h < 2 or w < 2:
        raise ShapeError("depthwise3x3_s2 needs H,W >= 2")
    oh, ow = (h + 1) // 2, (w + 1) // 2
    xp = _pad1(x.data)
    k = p.weight.data
    y = np.zeros((d, oh, ow), dtype=x.dtype)
    for n, (i, j) in enumerate(_OFFSETS):
        y += k[:, i, j, None, None] * xp[:, i : i + 2 * oh - 1 : 2, j : j + 2 * ow - 1 : 2]
    out = from_op(y, (x, p.weight))

    def bwd(g):
        if p.weight.requires_grad:
            dk = np.zeros_like(k)
            for n, (i, j) in enumerate(_OFFSETS):
                dk[:, i, j] = (g * xp[:, i : i + 2 * oh - 1 : 2, j : j + 2 * ow - 1 : 2]).sum(axis=(1, 2))
            p.weight.accumulate_grad(dk)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for n, (i, j) in enumerate(_OFFSETS):
                dxp[:, i : i + 2 * oh - 1 : 2, j : j + 2 * ow - 1 : 2] += k[:, i, j, None, None] * g
            x.accumulate_grad(dxp[:, 1:-1, 1:-1])

    out._backward_fn = bwd
    return out


def avg_pool(x, d):
    """Mean over non-overlapping d x d blocks per channel."""
    c, h, w = _chw(x)
    if d == 1:
        return x.reshape(c, h, w)
    if h % d or w % d:
        raise ShapeError(f"avg_pool: {d} does not divide extents {h}x{w}")
    oh, ow = h // d, w // d
    y = x.data.reshape(c, oh, d, ow, d).mean(axis=(2, 4))
    out = from_op(y, (x,))

    def bwd(g):
        if x.requires_grad:
            gx = np.repeat(np.repeat(g, d, axis=1), d, axis=2) / (d * d)
            x.accumulate_grad(gx)

    out._backward_fn = bwd
    return out


def nearest_upsample(x, d):
    """Replicate each source pixel into a d x d block."""
    c, h, w = _chw(x)
    if d < 1:
        raise ShapeError("upsample factor must be >= 1")
    if d == 1:
        return x.reshape(c, h, w)
    y = np.repeat(np.repeat(x.data, d, axis=1), d, axis=2)
    out = from_op(y, (x,))

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(c, h, d, w, d).sum(axis=(2, 4)))

    out._backward_fn = bwd
    return out


def batchnorm(x, p, training, update_running=True):
    """Per-channel normalization over the spatial axes with affine gamma/beta.

    Training mode uses batch statistics (and updates running stats unless
    update_running is False, which keeps the forward pure for gradient
    checks); eval mode uses the stored running statistics.
    """
    d, h, w = _chw(x)
    if p.gamma.shape[0] != d:
        raise ShapeError("batchnorm channel mismatch")
    eps = p.epsilon
    if training:
        x2d = x.data.reshape(d, h * w)
        mean = x2d.mean(axis=1)
        xc = x2d - mean[:, None]
        var = np.einsum("ij,ij->i", xc, xc) / (h * w)
        if update_running:
            m = p.momentum
            p.running_mean = (1 - m) * p.running_mean + m * mean.astype(p.running_mean.dtype)
            p.running_var = (1 - m) * p.running_var + m * var.astype(p.running_var.dtype)
        ivar = 1.0 / np.sqrt(var + eps)
        xhat = (xc * ivar[:, None]).reshape(d, h, w)
    else:
        mean = p.running_mean.astype(x.dtype)
        var = p.running_var.astype(x.dtype)
        ivar = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[:, None, None]) * ivar[:, None, None]
    y = p.gamma.data[:, None, None] * xhat + p.beta.data[:, None, None]
    out = from_op(y, (x, p.gamma, p.beta))

    def bwd(g):
        if p.gamma.requires_grad:
            p.gamma.accumulate_grad((g * xhat).sum(axis=(1, 2)))
        if p.beta.requires_grad:
            p.beta.accumulate_grad(g.sum(axis=(1, 2)))
        if x.requires_grad:
            gxh = g * p.gamma.data[:, None, None]
            if training:
                m = h * w
                sum_gxh = gxh.sum(axis=(1, 2), keepdims=True)
                sum_gxh_xhat = (gxh * xhat).sum(axis=(1, 2), keepdims=True)
                dx = (gxh - sum_gxh / m - xhat * sum_gxh_xhat / m) * ivar[:, None, None]
            else:
                dx = gxh * ivar[:, None, None]
            x.accumulate_grad(dx)

    out._backward_fn = bwd
    return out


def gcn_layer(a, x, w, sigma=None):
    """One graph-convolution layer: sigma(A X W)."""
    y = a.matmul(x).matmul(w)
    if sigma is not None:
        y = sigma(y)
    return y


def _chw(x):
    if x.data.ndim != 3:
        raise ShapeError(f"expected a (D,H,W) map, got shape {x.shape}")
    return x.shape


# -- parameter initialization ----------------------------------------------


def he_normal(rng, shape, fan_in, dtype):
    return Tensor(rng.normal(shape, std=float(np.sqrt(2.0 / fan_in)), dtype=dtype), requires_grad=True)


def init_conv1x1(rng, d_in, d_out, dtype, bias=True):
    w = he_normal(rng, (d_out, d_in), d_in, dtype)
    b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None
    return Conv1x1Params(w, b)


def init_conv3x3(rng, d_in, d_out, dtype, bias=True):
    w = he_normal(rng, (d_out, d_in, 3, 3), d_in * 9, dtype)
    b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None
    return Conv3x3Params(w, b)


def init_depthwise(rng, d, dtype):
    return DepthwiseConvParams(he_normal(rng, (d, 3, 3), 9, dtype))


def init_batchnorm(d, dtype):
    return BatchNormParams(
        Tensor(np.ones(d, dtype=dtype), requires_grad=True),
        Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
        np.zeros(d, dtype=dtype),
        np.ones(d, dtype=dtype),
    )
