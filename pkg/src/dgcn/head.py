"""Full context head: entry 3x3 conv, the two graph branches in parallel,
three-way pointwise fusion, exit 3x3 conv and a 1x1 pixel classifier."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import coord_gcn, feature_gcn, ops
from .tensor import RngState, ShapeError, Tensor


@dataclass
class DGCConfig:
    d_in: int = 16  # channels entering the head (backbone output)
    d_model: int = 32  # inner width D; D1 = D/2, D2 = D/4
    num_classes: int = 5
    d: int = 8  # coordinate-branch downsample rate
    mode: str = "avg-pool"
    order: str = "factor-first"
    scale_affinity: bool = False  # divide the affinity by the node count (stability option)
    use_coord: bool = True
    use_feature: bool = True

    def __post_init__(self):
        if self.d_model % 4:
            raise ValueError("inner width must be divisible by 4")

    @property
    def d1(self):
        return self.d_model // 2

    @property
    def d2(self):
        return self.d_model // 4

    def coord_config(self):
        return coord_gcn.CoordGCNConfig(
            d=self.d, mode=self.mode, order=self.order, scale_affinity=self.scale_affinity
        )


@dataclass
class DGCHead:
    config: DGCConfig
    entry: ops.Conv3x3Params
    bn_entry: ops.BatchNormParams
    coord: coord_gcn.CoordGCNParams | None
    feat: feature_gcn.FeatureGCNParams | None
    exit: ops.Conv3x3Params
    bn_exit: ops.BatchNormParams
    classifier: ops.Conv1x1Params


def init_head(cfg, rng, dtype=np.float32):
    d = cfg.d_model
    return DGCHead(
        config=cfg,
        entry=ops.init_conv3x3(rng, cfg.d_in, d, dtype),
        bn_entry=ops.init_batchnorm(d, dtype),
        coord=coord_gcn.init_coord_params(rng, d, cfg.coord_config(), dtype) if cfg.use_coord else None,
        feat=feature_gcn.init_feature_params(rng, d, dtype) if cfg.use_feature else None,
        exit=ops.init_conv3x3(rng, d, d, dtype),
        bn_exit=ops.init_batchnorm(d, dtype),
        classifier=ops.init_conv1x1(rng, d, cfg.num_classes, dtype),
    )


def fuse(x, xs, xf):
    """Three-way pointwise sum of the identity path and both branches."""
    return x.add(xs).add(xf)


def head_forward(features, head, training=False):
    """features (D_in, H, W) -> per-pixel class logits (C, H, W)."""
    cfg = head.config
    x = ops.conv3x3(features, head.entry)
    x = ops.batchnorm(x, head.bn_entry, training).relu()
    fused = x
    if head.coord is not None:
        fused = fused.add(coord_gcn.coord_gcn_forward(x, cfg.coord_config(), head.coord))
    if head.feat is not None:
        fused = fused.add(feature_gcn.feature_gcn_forward(x, head.feat, training))
    y = ops.conv3x3(fused, head.exit)
    y = ops.batchnorm(y, head.bn_exit, training).relu()
    return ops.conv1x1(y, head.classifier)


def head_param_tensors(head, prefix="head"):
    out = [
        (f"{prefix}.entry.weight", head.entry.weight),
        (f"{prefix}.entry.bias", head.entry.bias),
        (f"{prefix}.bn_entry.gamma", head.bn_entry.gamma),
        (f"{prefix}.bn_entry.beta", head.bn_entry.beta),
    ]
    if head.coord is not None:
        out += coord_gcn.coord_param_tensors(head.coord, prefix=f"{prefix}.coord")
    if head.feat is not None:
        out += feature_gcn.feature_param_tensors(head.feat, prefix=f"{prefix}.feat")
    out += [
        (f"{prefix}.exit.weight", head.exit.weight),
        (f"{prefix}.exit.bias", head.exit.bias),
        (f"{prefix}.bn_exit.gamma", head.bn_exit.gamma),
        (f"{prefix}.bn_exit.beta", head.bn_exit.beta),
        (f"{prefix}.classifier.weight", head.classifier.weight),
        (f"{prefix}.classifier.bias", head.classifier.bias),
    ]
    return out


def head_batchnorms(head):
    bns = [head.bn_entry, head.bn_exit]
    if head.feat is not None:
        bns += [head.feat.bn_theta, head.feat.bn_phi, head.feat.bn_reproj]
    return bns
