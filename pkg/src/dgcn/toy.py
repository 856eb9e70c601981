"""Synthetic long-range segmentation task plus the training and inference
strategies used to exercise the context module.

Each image carries one solid-colour "beacon" patch and a few identical grey
"target" squares placed far away from it (L-inf distance >= H/2). The class
of every target pixel is a function of the beacon colour, so a model whose
receptive field is smaller than H/2 cannot do better than chance on target
pixels. Background and beacon classes stay locally decidable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import head as head_mod
from . import ops
from .tensor import RngState, ShapeError, Tensor, from_op

IGNORE_LABEL = 255

BACKGROUND_CLASS = 0
BEACON_CLASS = 1
FIRST_TARGET_CLASS = 2

BEACON_SIZE = 8
TARGET_SIZE = 6


@dataclass
class ToySample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (H, W) int32 class ids
    seed: int


@dataclass
class TrainConfig:
    base_lr: float = 0.02
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0001
    iterations: int = 4000
    batch_size: int = 1
    ohem_k: int = 0  # 0 disables OHEM
    seed: int = 0
    eval_every: int = 500

    def __post_init__(self):
        for name in ("base_lr", "power", "momentum", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("bad iteration/batch settings")


def _beacon_color(t, k):
    # channel 0 encodes the class index, channels 1/2 mark "beacon"
    lead = 0.1 + 0.8 * (t / max(k - 1, 1))
    return np.array([lead, 1.0, 0.0], dtype=np.float32)


def _beacon_feasible(bcy, bcx, h, w):
    # a target centroid can range over [TARGET_SIZE/2, dim - TARGET_SIZE/2];
    # the beacon must leave at least one axis with >= h/2 of reach
    lo, hi_y, hi_x = TARGET_SIZE / 2, h - TARGET_SIZE / 2, w - TARGET_SIZE / 2
    return max(bcy - lo, hi_y - bcy) >= h / 2 or max(bcx - lo, hi_x - bcx) >= h / 2


def gen_toy_sample(rng, h, w, c):
    k = c - 2  # number of target classes
    for _geometry_attempt in range(50):
        img = rng.uniform((3, h, w), 0.0, 1.0, dtype=np.float32)
        labels = np.zeros((h, w), dtype=np.int32)

        for _ in range(100):
            by = int(rng.integers(0, h - BEACON_SIZE + 1))
            bx = int(rng.integers(0, w - BEACON_SIZE + 1))
            bcy, bcx = by + BEACON_SIZE / 2, bx + BEACON_SIZE / 2
            if _beacon_feasible(bcy, bcx, h, w):
                break
        else:
            raise RuntimeError("no feasible beacon position")  # impossible for h,w >= 32
        t = int(rng.integers(0, k))
        img[:, by : by + BEACON_SIZE, bx : bx + BEACON_SIZE] = _beacon_color(t, k)[:, None, None]
        labels[by : by + BEACON_SIZE, bx : bx + BEACON_SIZE] = BEACON_CLASS

        n_targets = int(rng.integers(2, 5))
        placed = []
        for _ in range(n_targets):
            for _attempt in range(100):
                ty = int(rng.integers(0, h - TARGET_SIZE + 1))
                tx = int(rng.integers(0, w - TARGET_SIZE + 1))
                tcy, tcx = ty + TARGET_SIZE / 2, tx + TARGET_SIZE / 2
                if max(abs(tcy - bcy), abs(tcx - bcx)) < h / 2:
                    continue
                if abs(ty - by) < BEACON_SIZE and abs(tx - bx) < BEACON_SIZE:
                    continue
                if any(abs(ty - py) < TARGET_SIZE and abs(tx - px) < TARGET_SIZE for py, px in placed):
                    continue
                img[:, ty : ty + TARGET_SIZE, tx : tx + TARGET_SIZE] = 0.5
                labels[ty : ty + TARGET_SIZE, tx : tx + TARGET_SIZE] = FIRST_TARGET_CLASS + t
                placed.append((ty, tx))
                break
        if len(placed) == n_targets:
            return img, labels, t
    raise RuntimeError("failed to place target squares after bounded retries")


def gen_toy_dataset(seed, count, h=64, w=64, c=5):
    """Deterministic list of samples; per-sample seeding, so any subset is
    reproducible independently of generation order."""
    if h < 32 or w < 32:
        raise ValueError("toy images must be at least 32x32")
    if c < 3:
        raise ValueError("need at least 3 classes (background, beacon, one target)")
    root = RngState(seed)
    samples = []
    for i in range(count):
        rng = root.child(i)
        img, labels, _ = gen_toy_sample(rng, h, w, c)
        samples.append(ToySample(img, labels, seed=rng.seed))
    return samples


def split_dataset(samples, val_fraction=0.2):
    """Deterministic index partition: every fifth sample (by position) is
    held out for validation at the default fraction."""
    stride = max(int(round(1.0 / val_fraction)), 2)
    train = [s for i, s in enumerate(samples) if i % stride != 0]
    val = [s for i, s in enumerate(samples) if i % stride == 0]
    return train, val


# -- schedules and losses --------------------------------------------------


def poly_lr(iteration, total, base, power=0.9):
    if iteration < 0 or iteration > total:
        raise ValueError(f"iteration {iteration} outside [0, {total}]")
    return base * (1.0 - iteration / total) ** power


def _pixel_ce(logits_data, labels_flat):
    c = logits_data.shape[0]
    lm = logits_data.reshape(c, -1)
    m = lm.max(axis=0)
    lse = m + np.log(np.exp(lm - m).sum(axis=0))
    picked = lm[np.clip(labels_flat, 0, c - 1), np.arange(lm.shape[1])]
    return lse - picked, lm, lse


def softmax_cross_entropy(logits, labels, k=None, ignore_label=IGNORE_LABEL):
    """Mean negative log-softmax of the true class over non-ignored pixels.

    With k set, only the k highest-loss pixels contribute (OHEM); ties are
    broken by ascending pixel index and k is clamped to the pixel count.
    """
    c, h, w = logits.shape
    labels_flat = np.asarray(labels).reshape(-1)
    if labels_flat.size != h * w:
        raise ShapeError("label grid does not match logits extents")
    valid = labels_flat != ignore_label
    if not valid.any():
        raise ValueError("no non-ignored pixels in loss")
    bad = labels_flat[valid]
    if bad.min() < 0 or bad.max() >= c:
        raise ValueError("label id outside class range")
    ce, lm, lse = _pixel_ce(logits.data, labels_flat)

    valid_idx = np.flatnonzero(valid)
    if k is not None:
        if k < 1:
            raise ValueError("OHEM k must be >= 1")
        k = min(k, valid_idx.size)
        # stable sort on descending loss keeps ascending-index tie order
        order = np.argsort(-ce[valid_idx], kind="stable")[:k]
        sel = valid_idx[order]
    else:
        sel = valid_idx
    loss_val = np.asarray(ce[sel].mean(), dtype=logits.dtype)
    out = from_op(loss_val, (logits,))

    def bwd(g):
        if logits.requires_grad:
            p_sel = np.exp(lm[:, sel] - lse[sel])
            p_sel[labels_flat[sel], np.arange(sel.size)] -= 1.0
            d = np.zeros_like(lm)
            d[:, sel] = p_sel * (float(np.asarray(g).reshape(())) / sel.size)
            logits.accumulate_grad(d.reshape(c, h, w))

    out._backward_fn = bwd
    return out


def cross_entropy(logits, labels, ignore_label=IGNORE_LABEL):
    return softmax_cross_entropy(logits, labels, k=None, ignore_label=ignore_label)


def ohem_loss(logits, labels, k, ignore_label=IGNORE_LABEL):
    return softmax_cross_entropy(logits, labels, k=k, ignore_label=ignore_label)


# -- metrics ----------------------------------------------------------------


def mean_iou(preds, labels, num_classes):
    """Dataset-level mean IoU. Classes absent from both predictions and
    labels are excluded from the mean. Returns (miou, per-class array with
    NaN for excluded classes)."""
    inter = np.zeros(num_classes, dtype=np.int64)
    union = np.zeros(num_classes, dtype=np.int64)
    if isinstance(preds, np.ndarray):
        preds, labels = [preds], [labels]
    for p, l in zip(preds, labels):
        p = np.asarray(p).reshape(-1)
        l = np.asarray(l).reshape(-1)
        keep = l != IGNORE_LABEL
        p, l = p[keep], l[keep]
        for cls in range(num_classes):
            pi = p == cls
            li = l == cls
            inter[cls] += np.logical_and(pi, li).sum()
            union[cls] += np.logical_or(pi, li).sum()
    per_class = np.full(num_classes, np.nan)
    present = union > 0
    per_class[present] = inter[present] / union[present]
    return float(np.nanmean(per_class)), per_class


# -- model: small local backbone + context head ------------------------------


@dataclass
class ToyModel:
    config: head_mod.DGCConfig
    backbone: list  # [(Conv3x3Params, BatchNormParams), ...]
    head: head_mod.DGCHead


def init_toy_model(cfg, rng, backbone_width=16, backbone_depth=4, dtype=np.float32):
    layers = []
    d_prev = 3
    for _ in range(backbone_depth):
        layers.append((ops.init_conv3x3(rng, d_prev, backbone_width, dtype), ops.init_batchnorm(backbone_width, dtype)))
        d_prev = backbone_width
    if cfg.d_in != backbone_width:
        cfg = head_mod.DGCConfig(**{**cfg.__dict__, "d_in": backbone_width})
    return ToyModel(cfg, layers, head_mod.init_head(cfg, rng, dtype))


def model_forward(model, image, training=False):
    x = image if isinstance(image, Tensor) else Tensor(image)
    for conv, bn in model.backbone:
        x = ops.conv3x3(x, conv)
        x = ops.batchnorm(x, bn, training).relu()
    return head_mod.head_forward(x, model.head, training)


def model_param_tensors(model):
    out = []
    for i, (conv, bn) in enumerate(model.backbone):
        out.append((f"backbone.{i}.weight", conv.weight))
        out.append((f"backbone.{i}.bias", conv.bias))
        out.append((f"backbone.{i}.bn.gamma", bn.gamma))
        out.append((f"backbone.{i}.bn.beta", bn.beta))
    out += head_mod.head_param_tensors(model.head)
    return out


def model_batchnorms(model):
    return [bn for _, bn in model.backbone] + head_mod.head_batchnorms(model.head)


# -- inference ---------------------------------------------------------------


def _nearest_resize(arr, oh, ow):
    h, w = arr.shape[-2], arr.shape[-1]
    yi = (np.arange(oh) * h // oh).astype(np.intp)
    xi = (np.arange(ow) * w // ow).astype(np.intp)
    return np.ascontiguousarray(arr[..., yi[:, None], xi[None, :]])


def _softmax(logits):
    m = logits.max(axis=0, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=0, keepdims=True)


def multi_scale_infer(model, image, scales):
    """Average class probabilities over nearest-resized copies of the image;
    returns log of the averaged probability map at base resolution."""
    if not scales:
        raise ValueError("scales must be nonempty")
    _, h, w = image.shape
    d = model.config.d
    acc = None
    for s in scales:
        if s <= 0:
            raise ValueError("scales must be positive")
        sh, sw = int(round(h * s)), int(round(w * s))
        if sh < d or sw < d:
            raise ValueError(f"scale {s} shrinks the image below the downsample rate {d}")
        scaled = image if (sh, sw) == (h, w) else _nearest_resize(image, sh, sw)
        logits = model_forward(model, scaled, training=False).data
        probs = _softmax(logits)
        if (sh, sw) != (h, w):
            probs = _nearest_resize(probs, h, w)
        acc = probs if acc is None else acc + probs
    return np.log(acc / len(scales))


def predict(model, image, scales=None):
    if scales is None or list(scales) == [1]:
        logits = model_forward(model, image, training=False).data
    else:
        logits = multi_scale_infer(model, image, scales)
    return logits.argmax(axis=0).astype(np.int32)


def evaluate(model, samples, scales=None):
    preds = [predict(model, s.image, scales) for s in samples]
    return mean_iou(preds, [s.labels for s in samples], model.config.num_classes)


# -- training ----------------------------------------------------------------

VARIANTS = ("baseline", "coord", "feat", "both")


def variant_flags(variant):
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    return variant in ("coord", "both"), variant in ("feat", "both")


def train(model, train_cfg, train_samples, val_samples=None, log=None):
    """SGD with momentum, weight decay and poly LR decay. Deterministic for a
    fixed seed. Appends (iter, lr, loss, val_miou) rows to `log` if given."""
    params = [(n, t) for n, t in model_param_tensors(model) if t is not None]
    velocity = {n: np.zeros_like(t.data) for n, t in params}
    order_rng = RngState(train_cfg.seed, counter=1 << 32)
    perm = []
    dtype = params[0][1].dtype

    for it in range(train_cfg.iterations):
        lr = poly_lr(it, train_cfg.iterations, train_cfg.base_lr, train_cfg.power)
        total = 0.0
        for _ in range(train_cfg.batch_size):
            if not perm:
                perm = list(order_rng.integers(0, len(train_samples), size=len(train_samples)))
            sample = train_samples[perm.pop()]
            logits = model_forward(model, Tensor(sample.image.astype(dtype)), training=True)
            k = train_cfg.ohem_k if train_cfg.ohem_k > 0 else None
            loss = softmax_cross_entropy(logits, sample.labels, k=k)
            total += loss.item()
            loss.backward()
        if not np.isfinite(total):
            raise FloatingPointError(f"training diverged at iteration {it}: loss={total}")
        inv_b = 1.0 / train_cfg.batch_size
        for name, t in params:
            g = t.grad * inv_b + train_cfg.weight_decay * t.data
            v = velocity[name]
            v *= train_cfg.momentum
            v += g
            t.data -= (lr * v).astype(t.dtype)
            t.zero_grad()
        if log is not None and ((it + 1) % train_cfg.eval_every == 0 or it + 1 == train_cfg.iterations):
            miou = evaluate(model, val_samples)[0] if val_samples else float("nan")
            log.append((it + 1, lr, total * inv_b, miou))
    return model


def train_variant(variant, dgc_cfg, train_cfg, samples, backbone_width=16):
    use_coord, use_feature = variant_flags(variant)
    cfg = head_mod.DGCConfig(**{**dgc_cfg.__dict__, "use_coord": use_coord, "use_feature": use_feature})
    rng = RngState(train_cfg.seed)
    model = init_toy_model(cfg, rng, backbone_width=backbone_width)
    train_set, val_set = split_dataset(samples)
    log = []
    train(model, train_cfg, train_set, val_set, log)
    return model, log
