"""Numerical verification: finite-difference gradient checks over every
parameter group of the head, and paired-order equivalence trials for the
coordinate-branch message."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import coord_gcn, head as head_mod, toy
from .tensor import RngState, Tensor, finite_diff_grad, rel_error


@dataclass
class GradCheckResult:
    name: str
    rel_err: float
    passed: bool


def grad_rel_error(analytic, numeric, floor=1e-3):
    """Max-norm relative error with an absolute floor.

    The floor keeps mathematically zero gradients honest: a bias feeding a
    training-mode batch norm has exactly zero effect on the loss, so both
    sides are pure rounding noise and an unfloored ratio would be
    meaningless."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), floor))


def default_check_config():
    # small f64 head: wide enough to exercise both branches, cheap enough
    # to finite-difference every scalar
    return head_mod.DGCConfig(d_in=8, d_model=8, num_classes=3, d=4, mode="strided-conv")


def gradcheck_head(cfg=None, h=16, w=16, seed=0, eps=1e-6, threshold=1e-5, corrupt=False):
    """Backprop vs central differences for every parameter tensor of the
    head, in f64, against a cross-entropy loss on random labels.

    corrupt=True deliberately skews one analytic gradient (negative-control
    hook for the CLI's failure path)."""
    cfg = cfg or default_check_config()
    rng = RngState(seed)
    head = head_mod.init_head(cfg, rng, dtype=np.float64)
    x = Tensor(rng.normal((cfg.d_in, h, w), dtype=np.float64))
    labels = rng.integers(0, cfg.num_classes, size=(h, w)).astype(np.int32)

    def loss_fn():
        logits = head_mod.head_forward(x, head, training=True)
        return toy.cross_entropy(logits, labels)

    # freeze BN running-stat updates so the loss is a pure function
    for bn in head_mod.head_batchnorms(head):
        bn.momentum = 0.0

    loss = loss_fn()
    loss.backward()
    results = []
    for name, param in head_mod.head_param_tensors(head):
        analytic = param.grad.copy()
        if corrupt and name.endswith("w_s"):
            analytic = analytic * 1.5 + 0.1
        param.zero_grad()

        def probe(p, _param=param):
            saved = _param.data
            _param.data = p.data
            try:
                return loss_fn()
            finally:
                _param.data = saved

        numeric = finite_diff_grad(probe, param, eps=eps).data
        err = grad_rel_error(analytic, numeric)
        results.append(GradCheckResult(name, err, err < threshold))
    return results


def gradcheck_params(build_forward, params, eps=1e-5, threshold=1e-5):
    """Generic gradient check: build_forward() -> scalar loss Tensor; params
    is an iterable of (name, Tensor)."""
    loss = build_forward()
    loss.backward()
    results = []
    for name, param in params:
        analytic = param.grad.copy()
        param.zero_grad()

        def probe(p, _param=param):
            saved = _param.data
            _param.data = p.data
            try:
                return build_forward()
            finally:
                _param.data = saved

        numeric = finite_diff_grad(probe, param, eps=eps).data
        err = grad_rel_error(analytic, numeric)
        results.append(GradCheckResult(name, err, err < threshold))
    return results


def order_equivalence_trials(trials=20, n=64, width=32, seed=0, dtype=np.float64):
    """Relative disagreement between adjacency-first and factor-first message
    evaluation on random node features; returns one error per trial."""
    root = RngState(seed)
    errs = []
    cfg = coord_gcn.CoordGCNConfig(d=1)
    for i in range(trials):
        rng = root.child(i)
        params = coord_gcn.init_coord_params(rng, width, cfg, dtype=dtype)
        v = Tensor(rng.normal((n, width), dtype=dtype))
        m_adj = coord_gcn.coord_message(v, params, order="adjacency-first")
        m_fac = coord_gcn.coord_message(v, params, order="factor-first")
        errs.append(rel_error(m_adj.data, m_fac.data))
    return errs
