from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from lcdg.checkpoint import load_checkpoint
from lcdg.training import (
    ClassifierTrainOptions,
    DenoiserTrainOptions,
    DivergenceError,
    condition_fn_for,
    load_classifier,
    predict,
    smoothed_final_loss,
    train_classifier,
    train_denoiser,
)

OPTS = DenoiserTrainOptions(steps=6, batch_size=4, lr=1e-3, seed=5, log_every=0)


def test_resume_is_bit_exact(tiny_data, tiny_cfg, short_sched):
    full = train_denoiser(tiny_data, tiny_cfg, short_sched, OPTS)
    half = train_denoiser(tiny_data, tiny_cfg, short_sched, replace(OPTS, steps=3))
    resumed = train_denoiser(tiny_data, tiny_cfg, short_sched, OPTS, resume=half.checkpoint)
    a, b = full.model.state_dict(), resumed.model.state_dict()
    assert a.keys() == b.keys()
    for k in a:
        assert np.array_equal(a[k], b[k]), k
    assert resumed.losses == full.losses


def test_outputs_written(tiny_data, tiny_cfg, short_sched, tmp_path):
    train_denoiser(tiny_data, tiny_cfg, short_sched, replace(OPTS, checkpoint_every=3), out_dir=tmp_path)
    rows = (tmp_path / "loss.csv").read_text().splitlines()
    assert rows[0] == "step,loss,seconds" and len(rows) == 7
    ckpt = load_checkpoint(tmp_path / "denoiser_step3.ckpt")
    assert ckpt.metadata["train"]["step"] == 3
    assert (tmp_path / "denoiser_step6.ckpt").exists()


def test_divergence_guard(tiny_data, tiny_cfg, short_sched):
    with pytest.raises(DivergenceError):
        train_denoiser(tiny_data, tiny_cfg, short_sched, replace(OPTS, divergence_factor=0.0))


def test_denoiser_loss_goes_down(tiny_data, tiny_cfg, short_sched):
    res = train_denoiser(tiny_data, tiny_cfg, short_sched, replace(OPTS, steps=80, batch_size=8, lr=3e-3))
    assert np.mean(res.losses[-20:]) < np.mean(res.losses[:20])


def test_smoothed_final_loss():
    assert smoothed_final_loss([4.0, 2.0, 1.0, 3.0], window=2) == 2.0
    assert np.isnan(smoothed_final_loss([]))


@pytest.mark.parametrize("kind,channels", [("edge", 1), ("mask", 1), ("stroke", 3), ("palette", 3)])
def test_condition_fn_shapes(kind, channels, rng):
    from lcdg.data import gen_dataset

    data = gen_dataset(4, seed=0, channels=channels, size=16)
    target = condition_fn_for(data, kind)(0, rng)
    assert target.shape[-2:] == (16, 16)
    assert np.isfinite(target).all()


def test_classifier_learns_and_round_trips(tmp_path):
    from lcdg.checkpoint import save_checkpoint
    from lcdg.data import gen_dataset

    train = gen_dataset(256, seed=1, size=16)
    val = gen_dataset(128, seed=1, split="val", size=16)
    res = train_classifier(train, val, ClassifierTrainOptions(steps=150, batch_size=32), out_dir=tmp_path)
    logits, feats = predict(res.model, val.images)
    assert (logits.argmax(1) == val.shape_labels).mean() > 0.5
    save_checkpoint(tmp_path / "clf.ckpt", res.checkpoint)
    clf, _ = load_classifier(tmp_path / "clf.ckpt")
    logits2, feats2 = predict(clf, val.images)
    np.testing.assert_array_equal(feats, feats2)
    assert (tmp_path / "classifier.csv").exists()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_denoiser_loss_oracle_short_budget(seed):
    # the full-budget oracle (20k steps) crosses 0.5 within the first few hundred steps
    from lcdg.data import gen_dataset
    from lcdg.diffusion import make_schedule
    from lcdg.unet import UNetConfig

    data = gen_dataset(2000, seed=seed)
    res = train_denoiser(data, UNetConfig(base_channels=8, blocks_per_stage=1), make_schedule(),
                         DenoiserTrainOptions(steps=600, seed=seed, log_every=0))
    assert smoothed_final_loss(res.losses, window=100) < 0.5
