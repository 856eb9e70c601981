"""Analytic parameter and FLOP accounting.

Conventions (declared so comparisons against published figures mean
something): 1 multiply-accumulate = 2 FLOPs; conv1x1 = 2*N*D_in*D_out;
k x k conv = 2*k*k*N*D_in*D_out; matmul(m,k,n) = 2*m*k*n; batch norm,
ReLU, pooling, upsampling and pointwise sums are 1 FLOP per output
element. Biases are not counted in FLOPs. Parameter counts include
weights, biases and BN gamma/beta; BN running statistics are excluded.

All counts are pure functions of the configuration; nothing is executed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import coord_gcn, feature_gcn, head as head_mod

# Published reference constants (used only for ratio printing).
PUBLISHED_MODULE_PARAMS = 1_240_704
PUBLISHED_MODULE_GFLOPS = 14.15
PUBLISHED_NONLOCAL_GFLOPS = 24.87
PUBLISHED_NONLOCAL_PARAMS = 1_496_224


@dataclass
class CostRow:
    name: str
    params: int
    flops: int


@dataclass
class CostReport:
    order: str
    scope: str  # "module-only" or "with-head"
    rows: list

    @property
    def total_params(self):
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self):
        return sum(r.flops for r in self.rows)


def conv1x1_flops(n, d_in, d_out):
    return 2 * n * d_in * d_out


def convkxk_flops(n, d_in, d_out, k=3):
    return 2 * k * k * n * d_in * d_out


def matmul_flops(m, k, n):
    return 2 * m * k * n


def conv1x1_params(d_in, d_out, bias=True):
    return d_in * d_out + (d_out if bias else 0)


def convkxk_params(d_in, d_out, k=3, bias=True):
    return k * k * d_in * d_out + (d_out if bias else 0)


def bn_params(d):
    return 2 * d


def downsampler_params(cfg):
    if cfg.mode == "strided-conv":
        return cfg.coord_config().chain_len * cfg.d_model * 9
    return 0


def downsampler_flops(cfg, h, w):
    if cfg.mode == "strided-conv":
        total = 0
        hh, ww = h, w
        for _ in range(cfg.coord_config().chain_len):
            hh, ww = (hh + 1) // 2, (ww + 1) // 2
            total += 2 * 9 * cfg.d_model * hh * ww
        return total
    # average pooling: one flop per pooled output element
    return cfg.d_model * (h // cfg.d) * (w // cfg.d)


def coord_message_flops(n, dh, order):
    """FLOPs of (delta(V) psi(V)^T) upsilon(V) W_S for one evaluation order."""
    if order == "adjacency-first":
        return matmul_flops(n, dh, n) + matmul_flops(n, n, dh) + matmul_flops(n, dh, dh)
    if order == "factor-first":
        return matmul_flops(dh, n, dh) + matmul_flops(n, dh, dh) + matmul_flops(n, dh, dh)
    raise ValueError(f"unknown order {order!r}")


def module_rows(cfg, h, w, order):
    """Per-submodule costs of the context module itself (no entry/exit convs)."""
    d, dh, d1, d2 = cfg.d_model, cfg.d_model // 2, cfg.d1, cfg.d2
    n_pix = h * w
    n_nodes = (h // cfg.d) * (w // cfg.d)
    rows = []
    if cfg.use_coord:
        rows.append(CostRow("coord.downsample", downsampler_params(cfg), downsampler_flops(cfg, h, w)))
        rows.append(
            CostRow(
                "coord.node_transforms",
                3 * conv1x1_params(d, dh),
                3 * conv1x1_flops(n_nodes, d, dh),
            )
        )
        rows.append(CostRow("coord.message", dh * dh, coord_message_flops(n_nodes, dh, order)))
        rows.append(
            CostRow(
                "coord.reproject",
                conv1x1_params(dh, d),
                dh * h * w + conv1x1_flops(n_pix, dh, d),  # upsample + xi
            )
        )
    if cfg.use_feature:
        rows.append(
            CostRow(
                "feat.theta",
                conv1x1_params(d, d1) + bn_params(d1),
                conv1x1_flops(n_pix, d, d1) + 2 * n_pix * d1,
            )
        )
        rows.append(
            CostRow(
                "feat.phi",
                conv1x1_params(d, d2, bias=False) + bn_params(d2),
                conv1x1_flops(n_pix, d, d2) + 2 * n_pix * d2,
            )
        )
        rows.append(CostRow("feat.project", 0, matmul_flops(d2, n_pix, d1)))
        rows.append(
            CostRow(
                "feat.message",
                d2 * d2 + d1 * d1,
                d2 * d2 + matmul_flops(d2, d2, d1) + matmul_flops(d2, d1, d1),
            )
        )
        rows.append(
            CostRow(
                "feat.reproject",
                conv1x1_params(d1, d) + bn_params(d),
                matmul_flops(n_pix, d2, d1) + conv1x1_flops(n_pix, d1, d) + 2 * n_pix * d,
            )
        )
    n_branches = int(cfg.use_coord) + int(cfg.use_feature)
    rows.append(CostRow("fuse", 0, n_branches * n_pix * d))
    return rows


def head_rows(cfg, h, w, order):
    """Module rows plus the surrounding 3x3 convs and classifier."""
    d, n_pix = cfg.d_model, h * w
    rows = [
        CostRow(
            "entry_conv3x3",
            convkxk_params(cfg.d_in, d) + bn_params(d),
            convkxk_flops(n_pix, cfg.d_in, d) + 2 * n_pix * d,
        )
    ]
    rows += module_rows(cfg, h, w, order)
    rows.append(
        CostRow(
            "exit_conv3x3",
            convkxk_params(d, d) + bn_params(d),
            convkxk_flops(n_pix, d, d) + 2 * n_pix * d,
        )
    )
    rows.append(
        CostRow(
            "classifier",
            conv1x1_params(d, cfg.num_classes),
            conv1x1_flops(n_pix, d, cfg.num_classes),
        )
    )
    return rows


def cost_report(cfg, h, w, order=None, scope="module-only"):
    order = order or cfg.order
    rows = module_rows(cfg, h, w, order) if scope == "module-only" else head_rows(cfg, h, w, order)
    return CostReport(order=order, scope=scope, rows=rows)


def count_params(named_tensors):
    """Exact learnable-scalar count of a constructed (sub)module."""
    return sum(t.size for _, t in named_tensors if t is not None)


def nonlocal_reference(d_model, h, w):
    """Cost of a full-resolution pairwise-affinity block at the same width
    conventions (query/key/value convs to D/2, N x N affinity, output conv).
    Comparison baseline only; never executed."""
    dh = d_model // 2
    n = h * w
    params = 3 * conv1x1_params(d_model, dh) + conv1x1_params(dh, d_model)
    flops = (
        3 * conv1x1_flops(n, d_model, dh)
        + matmul_flops(n, dh, n)  # affinity
        + n * n  # normalization, 1 flop per affinity entry
        + matmul_flops(n, n, dh)  # aggregation
        + conv1x1_flops(n, dh, d_model)
    )
    return params, flops


def render_table(reports, csv=False):
    lines = []
    if csv:
        lines.append("scope,order,submodule,params,flops")
        for rep in reports:
            for r in rep.rows:
                lines.append(f"{rep.scope},{rep.order},{r.name},{r.params},{r.flops}")
            lines.append(f"{rep.scope},{rep.order},TOTAL,{rep.total_params},{rep.total_flops}")
        return "\n".join(lines)
    for rep in reports:
        lines.append(f"== {rep.scope} ({rep.order}) ==")
        width = max(len(r.name) for r in rep.rows) + 2
        for r in rep.rows:
            lines.append(f"  {r.name:<{width}} params {r.params:>12,}   flops {r.flops:>16,}")
        lines.append(f"  {'TOTAL':<{width}} params {rep.total_params:>12,}   flops {rep.total_flops:>16,}")
    return "\n".join(lines)
