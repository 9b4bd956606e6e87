"""End-to-end smoke of the Python surface on miniature configs."""

import json
import math
import os

import numpy as np
import pytest

import cdp

TINY = {
    "model.image_size": "16",
    "model.patch": "8",
    "model.vit_depth": "1",
    "model.vit_dim": "16",
    "model.vit_heads": "2",
    "model.token_dim": "16",
    "model.lora_rank": "2",
    "model.perceiver_blocks": "1",
    "model.perceiver_heads": "2",
    "model.unet_channels": "8,16",
    "model.unet_kernel": "3",
    "model.unet_heads": "2",
    "model.temb_dim": "16",
    "model.obs_horizon": "2",
    "model.action_horizon": "8",
    "model.k_train": "10",
    "model.k_infer": "4",
    "data.render_px": "24",
}


def test_default_config_exposes_known_keys():
    cfg = cdp.default_config()
    assert "train.epochs" in cfg
    assert json.loads(cfg["model.variant"]) == "canonical"


def test_expert_is_reliable():
    rep = cdp.expert_rollouts(level="l0", trials=5, seed=3)
    assert rep["drop_rate"] == 1.0
    assert rep["trials"] == 5


def test_generate_train_eval_roundtrip(tmp_path):
    data_dir = str(tmp_path / "demos")
    info = cdp.generate_demos(data_dir, episodes=2, seed=11, render_px=24)
    assert info["episodes"] == 2
    assert os.path.exists(os.path.join(data_dir, "ep0001", "steps.csv"))

    ckpt = str(tmp_path / "tiny.ckpt")
    overrides = dict(TINY)
    overrides.update({"train.epochs": "1", "train.batch": "4", "train.jitter": "0.0"})
    summary = cdp.train_policy(data_dir, ckpt, overrides)
    assert summary["steps"] > 0
    assert math.isfinite(summary["last_loss"])

    policy = cdp.Policy(ckpt)
    frames = np.random.default_rng(0).random((4, 16, 16, 3), dtype=np.float32)
    proprio = np.asarray([[0.5, 0.5, 1.0], [0.5, 0.5, 1.0]], dtype=np.float32)
    acts = policy.infer(frames, proprio, seed=1)
    assert acts.shape == (8, 3)
    assert np.isfinite(acts).all()
    again = policy.infer(frames, proprio, seed=1)
    np.testing.assert_array_equal(acts, again)

    rep = policy.evaluate(level="l0", trials=1, seed=7, max_steps=12)
    assert rep["trials"] == 1


def test_pretrain_encoder(tmp_path):
    ckpt = str(tmp_path / "enc.ckpt")
    overrides = dict(TINY)
    overrides.update({"pretrain.steps": "3", "pretrain.batch_pairs": "2"})
    summary = cdp.pretrain_encoder(ckpt, overrides)
    assert summary["steps"] == 3
    assert math.isfinite(summary["last_loss"])
    assert os.path.exists(ckpt)


def test_bad_checkpoint_path_raises(tmp_path):
    with pytest.raises(Exception):
        cdp.Policy(str(tmp_path / "missing.ckpt"))
