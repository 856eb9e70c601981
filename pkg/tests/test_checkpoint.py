import numpy as np
import pytest

from dgcn.checkpoint import (
    CheckpointError,
    ConfigError,
    RunConfig,
    load_checkpoint,
    load_dataset,
    parse_config,
    render_config,
    save_checkpoint,
    save_dataset,
)
from dgcn.tensor import RngState
from dgcn.toy import gen_toy_dataset, init_toy_model, model_batchnorms, model_param_tensors


def _small_cfg(**kw):
    base = dict(
        d_model=16,
        num_classes=4,
        d=4,
        backbone_width=8,
        height=32,
        width=32,
        dataset_count=5,
        iterations=2,
        eval_every=1,
    )
    base.update(kw)
    return RunConfig(**base)


def _model(cfg, seed=0):
    return init_toy_model(cfg.dgc_config(), RngState(seed), backbone_width=cfg.backbone_width)


def test_config_roundtrip():
    cfg = _small_cfg(variant="coord", base_lr=0.013, mode="strided-conv")
    assert parse_config(render_config(cfg)) == cfg


def test_config_unknown_key_rejected():
    with pytest.raises(ConfigError) as e:
        parse_config("d_model=16\nlearning=0.1\n")
    assert "line 2" in str(e.value)


def test_config_bad_value_rejected():
    with pytest.raises(ConfigError):
        parse_config("iterations=abc\n")
    with pytest.raises(ConfigError):
        parse_config("just a line\n")


def test_config_comments_and_blank_lines():
    cfg = parse_config("# comment\n\nseed = 9\n")
    assert cfg.seed == 9


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    cfg = _small_cfg()
    model = _model(cfg, seed=3)
    # perturb running stats so they are non-trivial
    for bn in model_batchnorms(model):
        bn.running_mean += 0.25
        bn.running_var *= 1.5
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, cfg)
    back, cfg2 = load_checkpoint(path)
    assert cfg2 == cfg
    orig = dict(model_param_tensors(model))
    for name, t in model_param_tensors(back):
        assert t.data.tobytes() == orig[name].data.tobytes(), name
    for a, b in zip(model_batchnorms(model), model_batchnorms(back)):
        assert a.running_mean.tobytes() == b.running_mean.tobytes()
        assert a.running_var.tobytes() == b.running_var.tobytes()


def test_checkpoint_double_roundtrip_identical_bytes(tmp_path):
    cfg = _small_cfg(variant="feat")
    model = _model(cfg, seed=4)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(model, p1, cfg)
    back, _ = load_checkpoint(p1)
    save_checkpoint(back, p2, cfg)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTAckpt\n" + b"\x00" * 64)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    cfg = _small_cfg()
    model = _model(cfg)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, cfg)
    clipped = tmp_path / "clip.ckpt"
    clipped.write_bytes(path.read_bytes()[:-40])
    with pytest.raises((CheckpointError, IOError)):
        load_checkpoint(clipped)


def test_checkpoint_variant_respected(tmp_path):
    cfg = _small_cfg(variant="baseline")
    model = _model(cfg)
    assert model.head.coord is None and model.head.feat is None
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, cfg)
    back, _ = load_checkpoint(path)
    assert back.head.coord is None and back.head.feat is None


def test_dataset_cache_roundtrip(tmp_path):
    samples = gen_toy_dataset(5, 7, h=32, w=32, c=4)
    save_dataset(samples, tmp_path / "ds", 5)
    train_set, val_set = load_dataset(tmp_path / "ds")
    assert len(train_set) + len(val_set) == 7
    flat = {s.seed: s for s in samples}
    for s in train_set + val_set:
        assert np.array_equal(s.image, flat[s.seed].image)
        assert np.array_equal(s.labels, flat[s.seed].labels)


def test_dataset_cache_missing_manifest(tmp_path):
    with pytest.raises((CheckpointError, FileNotFoundError)):
        load_dataset(tmp_path / "nowhere")
