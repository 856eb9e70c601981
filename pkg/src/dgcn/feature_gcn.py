"""Feature-space branch: project pixels onto D2 learned channel-combination
nodes of width D1, smooth them over a learned graph with (I - A) edges, and
scatter back through the same projection.

BN + ReLU follow each 1x1 conv here (theta, phi and the reprojection conv);
the raw phi output is reused as the projection matrix for reprojection so
that it stays a plain linear combination of pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor


@dataclass
class FeatureGCNParams:
    theta: ops.Conv1x1Params  # D -> D1, with bias
    phi: ops.Conv1x1Params  # D -> D2, no bias: its output doubles as the projection matrix
    a_f: Tensor  # (D2, D2) learned adjacency
    w_f: Tensor  # (D1, D1) learned edge weights
    reproj: ops.Conv1x1Params  # D1 -> D, with bias
    bn_theta: ops.BatchNormParams
    bn_phi: ops.BatchNormParams
    bn_reproj: ops.BatchNormParams


def init_feature_params(rng, d_model, dtype=np.float32, adjacency_std=0.01):
    d1, d2 = d_model // 2, d_model // 4
    return FeatureGCNParams(
        theta=ops.init_conv1x1(rng, d_model, d1, dtype),
        phi=ops.init_conv1x1(rng, d_model, d2, dtype, bias=False),
        a_f=Tensor(rng.normal((d2, d2), std=adjacency_std, dtype=dtype), requires_grad=True),
        w_f=Tensor(rng.normal((d1, d1), std=adjacency_std, dtype=dtype), requires_grad=True),
        reproj=ops.init_conv1x1(rng, d1, d_model, dtype),
        bn_theta=ops.init_batchnorm(d1, dtype),
        bn_phi=ops.init_batchnorm(d2, dtype),
        bn_reproj=ops.init_batchnorm(d_model, dtype),
    )


def project_feature(x, params, training=False):
    """Returns (P, V_F): the raw (N, D2) projection matrix and the (D2, D1)
    node features aggregated from every pixel."""
    d, h, w = x.shape
    n = h * w
    phi_map = ops.conv1x1(x, params.phi)
    p_raw = phi_map.reshape(params.phi.d_out, n).transpose()  # (N, D2)
    theta_map = ops.conv1x1(x, params.theta)
    theta_map = ops.batchnorm(theta_map, params.bn_theta, training).relu()
    phi_bn = ops.batchnorm(phi_map, params.bn_phi, training).relu()
    p_vf = phi_bn.reshape(params.phi.d_out, n)  # (D2, N)
    t = theta_map.reshape(params.theta.d_out, n).transpose()  # (N, D1)
    v_f = p_vf.matmul(t)  # (D2, D1)
    return p_raw, v_f


def feature_message(v_f, a_f, w_f):
    """Laplacian-smoothed graph convolution: (I - A) V W."""
    if a_f.shape[0] != a_f.shape[1] or a_f.shape[0] != v_f.shape[0]:
        raise ShapeError("adjacency shape does not match node count")
    eye = Tensor(np.eye(a_f.shape[0], dtype=a_f.dtype))
    return eye.sub(a_f).matmul(v_f).matmul(w_f)


def reproject_feature(p, m_f, params, h, w, training=False):
    """Scatter node features back to pixels and restore D channels."""
    n = h * w
    if p.shape[0] != n:
        raise ShapeError(f"projection matrix has {p.shape[0]} pixels, grid is {h}x{w}")
    d1 = m_f.shape[1]
    flat = p.matmul(m_f)  # (N, D1)
    grid = flat.transpose().reshape(d1, h, w)
    y = ops.conv1x1(grid, params.reproj)
    return ops.batchnorm(y, params.bn_reproj, training).relu()


def feature_gcn_forward(x, params, training=False):
    _, h, w = x.shape
    p, v_f = project_feature(x, params, training)
    m_f = feature_message(v_f, params.a_f, params.w_f)
    return reproject_feature(p, m_f, params, h, w, training)


def feature_param_tensors(params, prefix="feat"):
    out = [
        (f"{prefix}.theta.weight", params.theta.weight),
        (f"{prefix}.theta.bias", params.theta.bias),
        (f"{prefix}.phi.weight", params.phi.weight),
        (f"{prefix}.a_f", params.a_f),
        (f"{prefix}.w_f", params.w_f),
        (f"{prefix}.reproj.weight", params.reproj.weight),
        (f"{prefix}.reproj.bias", params.reproj.bias),
    ]
    for bn_name in ("bn_theta", "bn_phi", "bn_reproj"):
        bn = getattr(params, bn_name)
        out.append((f"{prefix}.{bn_name}.gamma", bn.gamma))
        out.append((f"{prefix}.{bn_name}.beta", bn.beta))
    return out
