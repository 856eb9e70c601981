"""Coordinate-space branch: downsample-project, reason over the cluster
graph, reproject by nearest-neighbour upsampling.

The branch is deliberately free of batch norm and ReLU: its three node
transforms, the edge-weight matmul and the output 1x1 conv are all linear.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

MODES = ("avg-pool", "strided-conv")
ORDERS = ("adjacency-first", "factor-first")


@dataclass
class CoordGCNConfig:
    d: int = 8  # downsample rate for the cluster grid
    mode: str = "avg-pool"
    order: str = "factor-first"
    scale_affinity: bool = False  # optional 1/n scaling of the raw dot-product affinity

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}")
        if self.mode == "strided-conv" and (self.d & (self.d - 1)) != 0:
            raise ValueError("strided-conv mode needs a power-of-two downsample rate")

    @property
    def chain_len(self):
        return int(round(np.log2(self.d))) if self.mode == "strided-conv" else 0


@dataclass
class CoordGCNParams:
    downsampler: list  # log2(d) DepthwiseConvParams for strided-conv, else []
    delta: ops.Conv1x1Params  # D -> D/2
    psi: ops.Conv1x1Params  # D -> D/2
    upsilon: ops.Conv1x1Params  # D -> D/2
    w_s: Tensor  # (D/2, D/2), no bias
    xi: ops.Conv1x1Params  # D/2 -> D


def init_coord_params(rng, d_model, cfg, dtype=np.float32):
    down = [ops.init_depthwise(rng, d_model, dtype) for _ in range(cfg.chain_len)]
    half = d_model // 2
    return CoordGCNParams(
        downsampler=down,
        delta=ops.init_conv1x1(rng, d_model, half, dtype),
        psi=ops.init_conv1x1(rng, d_model, half, dtype),
        upsilon=ops.init_conv1x1(rng, d_model, half, dtype),
        w_s=ops.he_normal(rng, (half, half), half, dtype),
        xi=ops.init_conv1x1(rng, half, d_model, dtype),
    )


def project_coord(x, cfg, params):
    """Downsample the map by d and flatten to (n, D) node features."""
    d_model, h, w = x.shape
    if h % cfg.d or w % cfg.d:
        raise ShapeError(f"downsample rate {cfg.d} does not divide extents {h}x{w}")
    if cfg.mode == "avg-pool":
        v = ops.avg_pool(x, cfg.d)
    else:
        v = x
        for dw in params.downsampler:
            v = ops.depthwise3x3_s2(v, dw)
    gh, gw = h // cfg.d, w // cfg.d
    return v.reshape(d_model, gh * gw).transpose()  # (n, D)


def coord_message(v, params, order="factor-first", scale_affinity=False):
    """Graph message over cluster nodes: (delta(V) psi(V)^T) upsilon(V) W_S.

    Both evaluation orders give the same value; they differ only in which
    pairwise product is materialised ((n x n) vs (D/2 x D/2)).
    """
    n = v.shape[0]
    gh, gw = 1, n  # node grid is irrelevant for 1x1 maps; treat as 1 x n
    vm = v.transpose()  # (D, n) channel-major for the 1x1 transforms
    dv = _apply_1x1(vm, params.delta).transpose()  # (n, D/2)
    pv = _apply_1x1(vm, params.psi).transpose()
    uv = _apply_1x1(vm, params.upsilon).transpose()
    if order == "adjacency-first":
        adj = dv.matmul(pv.transpose())  # (n, n) dot-product affinity
        if scale_affinity:
            adj = adj.scale(1.0 / n)
        m = adj.matmul(uv)
    elif order == "factor-first":
        inner = pv.transpose().matmul(uv)  # (D/2, D/2)
        m = dv.matmul(inner)
        if scale_affinity:
            m = m.scale(1.0 / n)
    else:
        raise ValueError(f"unknown order {order!r}")
    return m.matmul(params.w_s)


def _apply_1x1(xm, p):
    """1x1 conv on a (D, n) matrix of node features."""
    y = p.weight.matmul(xm)
    if p.bias is not None:
        y = ops.add_channel_bias(y, p.bias)
    return y


def reproject_coord(m, params, h, w, d):
    """Nodes back to the pixel grid: reshape, nearest-upsample, 1x1 conv."""
    gh, gw = h // d, w // d
    if m.shape[0] != gh * gw:
        raise ShapeError(f"expected {gh * gw} nodes for a {h}x{w} grid at rate {d}, got {m.shape[0]}")
    half = m.shape[1]
    grid = m.transpose().reshape(half, gh, gw)
    up = ops.nearest_upsample(grid, d)
    return ops.conv1x1(up, params.xi)


def coord_gcn_forward(x, cfg, params):
    """Full coordinate branch; output has the input's (D, H, W) shape."""
    _, h, w = x.shape
    v = project_coord(x, cfg, params)
    m = coord_message(v, params, order=cfg.order, scale_affinity=cfg.scale_affinity)
    return reproject_coord(m, params, h, w, cfg.d)


def coord_param_tensors(params, prefix="coord"):
    out = []
    for i, dw in enumerate(params.downsampler):
        out.append((f"{prefix}.down{i}.weight", dw.weight))
    for name in ("delta", "psi", "upsilon"):
        p = getattr(params, name)
        out.append((f"{prefix}.{name}.weight", p.weight))
        if p.bias is not None:
            out.append((f"{prefix}.{name}.bias", p.bias))
    out.append((f"{prefix}.w_s", params.w_s))
    out.append((f"{prefix}.xi.weight", params.xi.weight))
    if params.xi.bias is not None:
        out.append((f"{prefix}.xi.bias", params.xi.bias))
    return out
