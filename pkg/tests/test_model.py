"""Tests for the tiny transformer: forward contracts, gradients, training
determinism, parameter bookkeeping, and the checkpoint format."""

import math

import numpy as np
import pytest

from gmmlab import data as data_mod
from gmmlab.fileio import FormatError
from gmmlab.mask import elm_param_count, gmm_param_count
from gmmlab.model import (
    RunConfig,
    TinyViT,
    checkpoint_bytes,
    checkpoint_from_bytes,
    evaluate,
    expected_mask_params,
    forward,
    forward_batch,
    forward_image,
    load_checkpoint,
    loss_and_grads,
    patch_embed,
    patchify,
    save_checkpoint,
    train,
)
from gmmlab.numerics import Rng

from helpers import rel_err


def toy_config(**kw):
    base = dict(image_size=8, patch=4, dim=8, depth=2, heads=2, kernels=2,
                classes=3, channels=1, mask_mode="gmm", batch_size=4,
                epochs=2, train_size=12, test_size=8)
    base.update(kw)
    return RunConfig(**base)


def toy_data(cfg, n, seed=0):
    spec = data_mod.SynthSpec(size=cfg.image_size, classes=cfg.classes, seed=seed,
                              bar_len=4.0, bars=2, distractors=0)
    return data_mod.synth_generate(spec, n)


# -----------------------------------------------------------------------------
# patchify / patch_embed
# -----------------------------------------------------------------------------


def test_patch_count_32_over_4():
    img = Rng(0).uniforms(3 * 32 * 32).reshape(3, 32, 32)
    assert patchify(img, 4).shape == (64, 48)


def test_patch_count_64_over_8():
    img = Rng(1).uniforms(64 * 64).reshape(1, 64, 64)
    assert patchify(img, 8).shape == (64, 64)


def test_patchify_layout_hand_case():
    # 2 channels, 4x4 image, patch 2: value encodes (channel, row, col)
    img = np.zeros((2, 4, 4))
    for c in range(2):
        for r in range(4):
            for col in range(4):
                img[c, r, col] = 100 * c + 10 * r + col
    p = patchify(img, 2)
    assert p.shape == (4, 8)
    # patch 0 is the top-left 2x2: channel-major, then pixel row-major
    assert p[0].tolist() == [0, 1, 10, 11, 100, 101, 110, 111]
    # patch 1 is the top-right 2x2
    assert p[1].tolist() == [2, 3, 12, 13, 102, 103, 112, 113]
    # patch 2 is the bottom-left
    assert p[2].tolist() == [20, 21, 30, 31, 120, 121, 130, 131]


def test_patchify_rejects_indivisible():
    with pytest.raises(ValueError, match="divisible"):
        patchify(np.zeros((1, 9, 9)), 4)


def test_patch_embed_zero_image_is_bias():
    w = Rng(2).normals(8 * 6).reshape(8, 6)
    b = Rng(3).normals(6)
    out = patch_embed(np.zeros((2, 4, 4)), 2, w, b)
    assert np.allclose(out, np.broadcast_to(b, (4, 6)))


# -----------------------------------------------------------------------------
# forward
# -----------------------------------------------------------------------------


def test_forward_zero_classifier_gives_bias_logits():
    cfg = toy_config()
    model = TinyViT.init(cfg, Rng(0))
    model.params["head.w"][:] = 0.0
    model.params["head.b"][:] = np.array([0.5, -1.0, 2.0])
    img = Rng(1).uniforms(64).reshape(1, 8, 8)
    assert np.allclose(forward_image(model, img), [0.5, -1.0, 2.0], atol=1e-12)


def test_forward_identical_images_identical_rows():
    cfg = toy_config()
    model = TinyViT.init(cfg, Rng(0))
    img = Rng(2).uniforms(64).reshape(1, 8, 8)
    logits = forward(model, np.stack([img, img]))
    assert np.array_equal(logits[0], logits[1])


def test_forward_huge_sigma_gmm_matches_none():
    cfg_gmm = toy_config(mask_mode="gmm", kernels=1)
    cfg_none = toy_config(mask_mode="none")
    m_gmm = TinyViT.init(cfg_gmm, Rng(5))
    m_none = TinyViT.init(cfg_none, Rng(5))
    # same non-mask weights; near-identity mask
    for k, v in m_none.params.items():
        m_gmm.params[k][...] = v
    for i in range(cfg_gmm.depth):
        m_gmm.params[f"block{i}.mask.alpha"][:] = 1.0
        m_gmm.params[f"block{i}.mask.sigma"][:] = 1e6
    img = Rng(6).uniforms(64).reshape(1, 8, 8)
    out_g = forward_image(m_gmm, img)
    out_n = forward_image(m_none, img)
    assert np.max(np.abs(out_g - out_n)) < 1e-6


def test_forward_geometry_mismatch():
    model = TinyViT.init(toy_config(), Rng(0))
    with pytest.raises(ValueError, match="geometry"):
        forward_batch(model, np.zeros((1, 1, 16, 16)))


def test_pooling_permutation_invariance():
    # With no mask and zero position embeddings, shuffling the patches of the
    # input image must not change the logits.
    cfg = toy_config(mask_mode="none")
    model = TinyViT.init(cfg, Rng(3))
    model.params["pos"][:] = 0.0
    img = Rng(4).uniforms(64).reshape(1, 8, 8)
    perm = Rng(5).permutation(4)
    patches = patchify(img, 4)
    shuffled = patches[perm]
    g = cfg.grid
    # rebuild an image whose patch list is the permuted one
    img2 = np.zeros_like(img)
    for idx in range(4):
        r, c = divmod(idx, g)
        img2[0, r * 4:(r + 1) * 4, c * 4:(c + 1) * 4] = shuffled[idx].reshape(4, 4)
    out1 = forward_image(model, img)
    out2 = forward_image(model, img2)
    assert np.allclose(out1, out2, atol=1e-12)


# -----------------------------------------------------------------------------
# loss
# -----------------------------------------------------------------------------


def test_loss_uniform_logits_is_log_classes():
    cfg = toy_config(classes=10)
    model = TinyViT.init(cfg, Rng(0))
    model.params["head.w"][:] = 0.0
    model.params["head.b"][:] = 0.0
    batch = Rng(1).uniforms(2 * 64).reshape(2, 1, 8, 8)
    loss, _ = loss_and_grads(model, batch, np.array([3, 7]))
    assert loss == pytest.approx(math.log(10.0), abs=1e-12)


def test_loss_rejects_bad_labels():
    model = TinyViT.init(toy_config(), Rng(0))
    batch = np.zeros((1, 1, 8, 8))
    with pytest.raises(ValueError, match="labels"):
        loss_and_grads(model, batch, np.array([3]))
    with pytest.raises(ValueError, match="labels"):
        loss_and_grads(model, batch, np.array([-1]))


def test_loss_duplicated_batch_unchanged():
    cfg = toy_config()
    model = TinyViT.init(cfg, Rng(0))
    batch = Rng(1).uniforms(2 * 64).reshape(2, 1, 8, 8)
    labels = np.array([0, 2])
    loss1, _ = loss_and_grads(model, batch, labels)
    loss2, _ = loss_and_grads(model, np.concatenate([batch, batch]),
                              np.concatenate([labels, labels]))
    assert loss1 == pytest.approx(loss2, abs=1e-12)


@pytest.mark.parametrize("mode", ["none", "gmm", "elm"])
def test_full_model_gradients_match_fd(mode):
    cfg = toy_config(mask_mode=mode)
    model = TinyViT.init(cfg, Rng(7))
    rng = Rng(8)
    batch = rng.uniforms(2 * 64).reshape(2, 1, 8, 8)
    labels = np.array([rng.randint(3), rng.randint(3)])
    _, grads = loss_and_grads(model, batch, labels)
    h = 1e-4
    items = [(k, i) for k, v in model.params.items() for i in range(v.size)]
    picks = [items[rng.randint(len(items))] for _ in range(50)]
    for name, idx in picks:
        flat = model.params[name].reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + h
        lp, _ = loss_and_grads(model, batch, labels)
        flat[idx] = orig - h
        lm, _ = loss_and_grads(model, batch, labels)
        flat[idx] = orig
        num = (lp - lm) / (2 * h)
        assert rel_err(grads[name].reshape(-1)[idx], num) < 1e-4, name


# -----------------------------------------------------------------------------
# parameter bookkeeping
# -----------------------------------------------------------------------------


@pytest.mark.parametrize("shared", [False, True])
def test_gmm_param_delta_matches_formula(shared):
    cfg_none = toy_config(mask_mode="none", depth=3, heads=2)
    cfg_gmm = toy_config(mask_mode="gmm", depth=3, heads=2, kernels=4,
                         shared_kernels=shared)
    none_total = TinyViT.init(cfg_none, Rng(0)).param_count()
    gmm_model = TinyViT.init(cfg_gmm, Rng(0))
    h_eff = 1 if shared else 2
    assert gmm_model.param_count() - none_total == gmm_param_count(4, h_eff, 3)
    assert gmm_model.mask_param_count() == gmm_param_count(4, h_eff, 3)
    assert expected_mask_params(cfg_gmm) == gmm_param_count(4, h_eff, 3)


def test_elm_param_delta_matches_formula():
    cfg_none = toy_config(mask_mode="none", depth=2)
    cfg_elm = toy_config(mask_mode="elm", depth=2)
    none_total = TinyViT.init(cfg_none, Rng(0)).param_count()
    elm_model = TinyViT.init(cfg_elm, Rng(0))
    n = cfg_elm.tokens
    assert elm_model.param_count() - none_total == elm_param_count(n, 2)


def test_published_table_deltas_from_real_models():
    # depth-15 model with 5 shared kernels -> +150; depth-9 ELM at N=64 -> +36,864
    cfg150 = RunConfig(image_size=32, patch=4, dim=16, depth=15, heads=4,
                       mask_mode="gmm", kernels=5, shared_kernels=True, classes=10)
    assert TinyViT.init(cfg150, Rng(0)).mask_param_count() == 150
    cfg_elm = RunConfig(image_size=32, patch=4, dim=16, depth=9, heads=4,
                        mask_mode="elm", classes=10)
    assert TinyViT.init(cfg_elm, Rng(0)).mask_param_count() == 36_864


# -----------------------------------------------------------------------------
# training loop
# -----------------------------------------------------------------------------


def test_train_zero_epochs_returns_init():
    cfg = toy_config(epochs=0)
    data = toy_data(cfg, 8)
    history, ckpt = train(cfg, data, data[:4])
    assert history == []
    init = TinyViT.init(cfg)
    for k, v in init.params.items():
        assert np.array_equal(ckpt.params[k], v)
    assert ckpt.step == 0 and ckpt.epoch == 0


def test_train_determinism_bitwise():
    cfg = toy_config(epochs=2)
    data = toy_data(cfg, 12)
    test = toy_data(cfg, 6, seed=9)
    h1, c1 = train(cfg, data, test)
    h2, c2 = train(cfg, data, test)
    assert h1 == h2
    assert checkpoint_bytes(c1) == checkpoint_bytes(c2)


def test_train_loss_decreases_on_synthetic_task():
    cfg = toy_config(dim=16, heads=2, epochs=10, train_size=64, batch_size=16,
                     lr=3e-3)
    data = toy_data(cfg, 64)
    test = toy_data(cfg, 16, seed=5)
    history, _ = train(cfg, data, test)
    assert history[-1]["train_loss"] < history[0]["train_loss"]


def test_train_history_schema():
    cfg = toy_config(epochs=1)
    data = toy_data(cfg, 8)
    history, _ = train(cfg, data, data[:4])
    assert list(history[0].keys()) == ["epoch", "lr", "train_loss", "train_acc", "test_acc"]


def test_train_augment_path_runs():
    cfg = toy_config(epochs=1, augment=True)
    data = toy_data(cfg, 8)
    history, _ = train(cfg, data, data[:4])
    assert len(history) == 1


def test_train_geometry_mismatch_rejected():
    cfg = toy_config()
    bad = [data_mod.Sample(image=np.zeros((1, 16, 16)), label=0)]
    with pytest.raises(ValueError, match="geometry|images are"):
        train(cfg, bad, bad)


def test_resume_equals_uninterrupted_bitwise():
    cfg = toy_config(epochs=4)
    data = toy_data(cfg, 12)
    test = toy_data(cfg, 6, seed=3)
    hist_full, ckpt_full = train(cfg, data, test)
    hist_a, ckpt_a = train(cfg, data, test, stop_after=2)
    hist_b, ckpt_b = train(cfg, data, test, start=ckpt_a)
    assert hist_a + hist_b == hist_full
    assert checkpoint_bytes(ckpt_b) == checkpoint_bytes(ckpt_full)


def test_resume_requires_matching_config():
    cfg = toy_config(epochs=2)
    data = toy_data(cfg, 8)
    _, ckpt = train(cfg, data, data[:4], stop_after=1)
    other = toy_config(epochs=2, lr=5e-4)
    with pytest.raises(ValueError, match="config"):
        train(other, data, data[:4], start=ckpt)


def test_evaluate_on_empty_returns_zero():
    model = TinyViT.init(toy_config(), Rng(0))
    assert evaluate(model, []) == 0.0


# -----------------------------------------------------------------------------
# checkpoint format
# -----------------------------------------------------------------------------


def _tiny_checkpoint():
    cfg = toy_config(epochs=1)
    data = toy_data(cfg, 8)
    _, ckpt = train(cfg, data, data[:4])
    return ckpt


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    ckpt = _tiny_checkpoint()
    path = str(tmp_path / "model.bin")
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    save_checkpoint(loaded, str(tmp_path / "model2.bin"))
    raw1 = (tmp_path / "model.bin").read_bytes()
    raw2 = (tmp_path / "model2.bin").read_bytes()
    assert raw1 == raw2
    assert loaded.step == ckpt.step and loaded.epoch == ckpt.epoch
    for k, v in ckpt.params.items():
        assert np.array_equal(loaded.params[k], v)
        assert np.array_equal(loaded.adam_m[k], ckpt.adam_m[k])
        assert np.array_equal(loaded.adam_v[k], ckpt.adam_v[k])


def test_checkpoint_truncation_detected(tmp_path):
    raw = checkpoint_bytes(_tiny_checkpoint())
    with pytest.raises(FormatError, match="truncated|CRC"):
        checkpoint_from_bytes(raw[: len(raw) // 2])


def test_checkpoint_bad_magic_detected():
    raw = checkpoint_bytes(_tiny_checkpoint())
    with pytest.raises(FormatError, match="magic"):
        checkpoint_from_bytes(b"NOTMAGIC" + raw[8:])


def test_checkpoint_unknown_version_refused():
    raw = bytearray(checkpoint_bytes(_tiny_checkpoint()))
    raw[8:12] = (99).to_bytes(4, "little")
    with pytest.raises(FormatError, match="version"):
        checkpoint_from_bytes(bytes(raw))


def test_checkpoint_crc_detects_corruption():
    raw = bytearray(checkpoint_bytes(_tiny_checkpoint()))
    raw[50] ^= 0xFF
    with pytest.raises(FormatError, match="CRC|truncated|config|unknown"):
        checkpoint_from_bytes(bytes(raw))


# -----------------------------------------------------------------------------
# config
# -----------------------------------------------------------------------------


def test_config_roundtrip():
    cfg = toy_config(lr=2.5e-4, shared_kernels=True)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown"):
        RunConfig.from_dict({**toy_config().to_dict(), "bogus": 1})


def test_config_validates_geometry():
    with pytest.raises(ValueError, match="divisible"):
        toy_config(patch=5).validate()
    with pytest.raises(ValueError, match="divisible"):
        toy_config(dim=9).validate()
    with pytest.raises(ValueError, match="mask_mode"):
        toy_config(mask_mode="fancy").validate()
