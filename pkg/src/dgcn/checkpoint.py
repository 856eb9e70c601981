"""Persistence: DGCN1 checkpoints, key=value run configs and the on-disk
dataset cache.

Checkpoint layout (all little-endian):
    DGCN1\n
    CONFIG <n-lines>\n  followed by that many key=value lines
    PARAMS <n-entries>\n
    one TNSR-dumped tensor per entry, each preceded by a `NAME <name>\n` line
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, fields

import numpy as np

from . import head as head_mod
from . import toy
from .tensor import RngState, Tensor, read_tensor, write_tensor

MAGIC = b"DGCN1\n"


class CheckpointError(IOError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    d_model: int = 32
    num_classes: int = 5
    d: int = 8
    mode: str = "avg-pool"
    order: str = "factor-first"
    variant: str = "both"
    backbone_width: int = 16
    # data
    height: int = 64
    width: int = 64
    dataset_count: int = 400
    # optimisation
    base_lr: float = 0.02
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0001
    iterations: int = 4000
    batch_size: int = 1
    ohem_k: int = 0
    seed: int = 0
    eval_every: int = 500

    def dgc_config(self):
        use_coord, use_feature = toy.variant_flags(self.variant)
        return head_mod.DGCConfig(
            d_in=self.backbone_width,
            d_model=self.d_model,
            num_classes=self.num_classes,
            d=self.d,
            mode=self.mode,
            order=self.order,
            # raw dot-product affinities grow with the node count; at toy
            # scale the 1/n normalization keeps SGD stable
            scale_affinity=True,
            use_coord=use_coord,
            use_feature=use_feature,
        )

    def train_config(self):
        return toy.TrainConfig(
            base_lr=self.base_lr,
            power=self.power,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            iterations=self.iterations,
            batch_size=self.batch_size,
            ohem_k=self.ohem_k,
            seed=self.seed,
            eval_every=self.eval_every,
        )


def render_config(cfg):
    return "".join(f"{f.name}={getattr(cfg, f.name)}\n" for f in fields(RunConfig))


def parse_config(text, base=None):
    cfg = base or RunConfig()
    known = {f.name: f.type for f in fields(RunConfig)}
    casts = {"int": int, "float": float, "str": str}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            setattr(cfg, key, casts[known[key]](value))
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for {key}: {e}") from None
    return cfg


def load_config_file(path, base=None):
    with open(path, "r") as fh:
        return parse_config(fh.read(), base)


# -- checkpoints --------------------------------------------------------------


def _state_entries(model):
    """All tensors needed to reproduce the model: learnable parameters plus
    BN running statistics."""
    entries = list(toy.model_param_tensors(model) if isinstance(model, toy.ToyModel) else head_mod.head_param_tensors(model))
    bns = toy.model_batchnorms(model) if isinstance(model, toy.ToyModel) else head_mod.head_batchnorms(model)
    names = [n for n, _ in entries]
    for name, t in entries:
        if t is None:
            raise CheckpointError(f"parameter {name} is missing")
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate parameter names")
    for i, bn in enumerate(bns):
        entries.append((f"running.{i}.mean", Tensor(bn.running_mean)))
        entries.append((f"running.{i}.var", Tensor(bn.running_var)))
    return entries


def save_checkpoint(model, path, run_cfg):
    entries = _state_entries(model)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        cfg_text = render_config(run_cfg)
        lines = cfg_text.count("\n")
        fh.write(f"CONFIG {lines}\n".encode("ascii"))
        fh.write(cfg_text.encode("ascii"))
        fh.write(f"PARAMS {len(entries)}\n".encode("ascii"))
        for name, t in entries:
            fh.write(f"NAME {name}\n".encode("ascii"))
            write_tensor(fh, t)


def _read_line(fh):
    line = b""
    while not line.endswith(b"\n"):
        c = fh.read(1)
        if not c:
            raise CheckpointError("truncated checkpoint")
        line += c
    return line.decode("ascii").rstrip("\n")


def load_checkpoint(path, dtype=np.float32):
    """Rebuild the model named in the stored config and restore every entry
    bit-exactly (with an explicit converting warning on dtype mismatch)."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a DGCN1 checkpoint")
        tag, _, count = _read_line(fh).partition(" ")
        if tag != "CONFIG":
            raise CheckpointError("missing CONFIG block")
        cfg_text = "".join(_read_line(fh) + "\n" for _ in range(int(count)))
        run_cfg = parse_config(cfg_text)
        tag, _, count = _read_line(fh).partition(" ")
        if tag != "PARAMS":
            raise CheckpointError("missing PARAMS block")
        n_entries = int(count)

        model = toy.init_toy_model(run_cfg.dgc_config(), RngState(0), backbone_width=run_cfg.backbone_width, dtype=dtype)
        slots = dict(_state_entries(model))
        seen = set()
        for _ in range(n_entries):
            tag, _, name = _read_line(fh).partition(" ")
            if tag != "NAME":
                raise CheckpointError("malformed parameter entry")
            t = read_tensor(fh)
            if name not in slots:
                raise CheckpointError(f"unknown parameter {name!r} for this config")
            if name in seen:
                raise CheckpointError(f"duplicate parameter {name!r}")
            seen.add(name)
            target = slots[name]
            if t.shape != target.shape:
                raise CheckpointError(f"{name}: shape {t.shape} does not match config shape {target.shape}")
            data = t.data
            if data.dtype != target.dtype:
                warnings.warn(f"{name}: converting checkpoint dtype {data.dtype} -> {target.dtype}")
                data = data.astype(target.dtype)
            target.data[...] = data
        missing = set(slots) - seen
        if missing:
            raise CheckpointError(f"checkpoint is missing entries: {sorted(missing)[:3]}...")
    # copy restored running stats back into the BN structs
    for i, bn in enumerate(toy.model_batchnorms(model)):
        bn.running_mean = slots[f"running.{i}.mean"].data.copy()
        bn.running_var = slots[f"running.{i}.var"].data.copy()
    return model, run_cfg


# -- dataset cache -------------------------------------------------------------


def save_dataset(samples, directory, seed):
    """One TNSR file per sample (image tensor then label tensor) plus a text
    manifest listing seeds and train/val membership."""
    os.makedirs(directory, exist_ok=True)
    train, val = toy.split_dataset(samples)
    val_ids = {id(s) for s in val}
    with open(os.path.join(directory, "manifest.txt"), "w") as mf:
        mf.write(f"DGCN-TOYSET seed={seed} count={len(samples)}\n")
        for i, s in enumerate(samples):
            name = f"sample_{i:05d}.tnsr"
            split = "val" if id(s) in val_ids else "train"
            mf.write(f"{i} seed={s.seed} split={split} file={name}\n")
            with open(os.path.join(directory, name), "wb") as fh:
                write_tensor(fh, Tensor(s.image))
                write_tensor(fh, Tensor(s.labels.astype(np.float32)))


def load_dataset(directory):
    manifest = os.path.join(directory, "manifest.txt")
    with open(manifest, "r") as mf:
        header = mf.readline()
        if not header.startswith("DGCN-TOYSET"):
            raise CheckpointError("not a toy dataset directory")
        train, val = [], []
        for line in mf:
            parts = dict(kv.split("=", 1) for kv in line.split()[1:])
            with open(os.path.join(directory, parts["file"]), "rb") as fh:
                image = read_tensor(fh).data
                labels = read_tensor(fh).data.astype(np.int32)
            sample = toy.ToySample(image, labels, seed=int(parts["seed"]))
            (val if parts["split"] == "val" else train).append(sample)
    return train, val
