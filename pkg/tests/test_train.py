"""Trainer behavior: batching, augmentation, checkpoints, resume determinism."""

import numpy as np
import pytest
import torch

from efdepth.checkpoint import load_model, save_model
from efdepth.config import RunConfig
from efdepth.errors import ConfigError
from efdepth.synth import SequenceSample
from efdepth.train import (
    Trainer,
    build_model,
    evaluate_samples,
    make_batch,
    predict_sample,
)

TINY = dict(
    resolution=16,
    seq_len=2,
    channels=(4, 6, 8),
    patches=(2, 4),
    n_blocks=2,
    state_channels=4,
    decoder_channels=(8, 6, 5),
    neighbors=4,
    offset_radius=3.0,
    prop_iters=2,
    batch_size=2,
    lr_fusion=1e-3,
    lr_refine=1e-3,
    loss_scales=2,
)


def tiny_cfg(**overrides):
    return RunConfig(**{**TINY, **overrides})


def make_samples(n=2, seq_len=2, h=16, w=16, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        frames = torch.from_numpy(rng.random((seq_len, 1, h, w))).float()
        voxels = torch.from_numpy(rng.normal(size=(seq_len, 5, h, w))).float()
        voxels[torch.rand(voxels.shape) < 0.7] = 0.0
        gt = torch.from_numpy(rng.uniform(4.0, 30.0, (seq_len, 1, h, w))).float()
        valid = torch.ones(seq_len, 1, h, w, dtype=torch.bool)
        out.append(SequenceSample(frames, voxels, gt, valid, rasters=()))
    return out


class TestMakeBatch:
    def test_deterministic_per_seed_epoch_index(self):
        cfg = tiny_cfg(augment=True, flip_prob=0.5, crop=8)
        samples = make_samples(3)
        a = make_batch(samples, [0, 2], cfg, epoch=4)
        b = make_batch(samples, [0, 2], cfg, epoch=4)
        for ta, tb in zip(a, b):
            assert torch.equal(ta, tb)
        c = make_batch(samples, [0, 2], cfg, epoch=5)
        assert any(not torch.equal(ta, tc) for ta, tc in zip(a, c))

    def test_flip_mirrors_all_tensors(self):
        cfg = tiny_cfg(augment=True, flip_prob=1.0)
        samples = make_samples(1)
        frames, voxels, gt, valid = make_batch(samples, [0], cfg, epoch=0)
        s = samples[0]
        assert torch.equal(frames[0], s.frames.flip(-1))
        assert torch.equal(voxels[0], s.voxels.flip(-1))
        assert torch.equal(gt[0], s.gt_depth.flip(-1))

    def test_no_augment_passthrough(self):
        cfg = tiny_cfg(augment=False)
        samples = make_samples(1)
        frames, voxels, gt, valid = make_batch(samples, [0], cfg, epoch=0)
        assert torch.equal(frames[0], samples[0].frames)
        assert torch.equal(voxels[0], samples[0].voxels)

    def test_zero_events_blanks_voxels(self):
        cfg = tiny_cfg(augment=False, zero_events=True)
        frames, voxels, gt, valid = make_batch(make_samples(1), [0], cfg, epoch=0)
        assert torch.equal(voxels, torch.zeros_like(voxels))

    def test_crop_shape_and_validation(self):
        cfg = tiny_cfg(augment=True, crop=8, flip_prob=0.0)
        frames, voxels, gt, valid = make_batch(make_samples(1), [0], cfg, epoch=0)
        assert frames.shape[-2:] == (8, 8)
        with pytest.raises(ConfigError, match="multiple of 8"):
            make_batch(make_samples(1), [0], tiny_cfg(augment=True, crop=6), 0)
        with pytest.raises(ConfigError, match="exceeds"):
            make_batch(make_samples(1), [0], tiny_cfg(augment=True, crop=24), 0)


class TestTrainer:
    def test_zero_epochs_checkpoint_equals_init(self, tmp_path):
        cfg = tiny_cfg(epochs=0, augment=False)
        torch.manual_seed(3)
        model = build_model(cfg)
        init = {k: v.clone() for k, v in model.state_dict().items()}
        trainer = Trainer(model, cfg, out_dir=tmp_path)
        report = trainer.fit(make_samples(2), epochs=0)
        assert report["steps"] == 0
        torch.manual_seed(99)
        other = build_model(cfg)
        load_model(tmp_path / "ckpt_latest.efd", other)
        for key, ref in init.items():
            assert torch.equal(other.state_dict()[key], ref), key

    def test_step_reduces_nothing_but_returns_floats(self):
        cfg = tiny_cfg(augment=False)
        torch.manual_seed(0)
        trainer = Trainer(build_model(cfg), cfg)
        batch = make_batch(make_samples(2), [0, 1], cfg, 0)
        mse, grad, total = trainer.step_batch(batch)
        assert isinstance(mse, float) and isinstance(total, float)
        assert total == pytest.approx(mse + cfg.loss_lambda * grad, rel=1e-6)
        assert total > 0

    def test_optimizer_state_roundtrip_exact(self, tmp_path):
        cfg = tiny_cfg(augment=False)
        torch.manual_seed(1)
        trainer = Trainer(build_model(cfg), cfg)
        samples = make_samples(2)
        batch = make_batch(samples, [0, 1], cfg, 0)
        for _ in range(3):
            trainer.step_batch(batch)
        trainer.global_step = 3
        path = tmp_path / "ckpt.efd"
        trainer.save(path)

        torch.manual_seed(2)
        restored = Trainer(build_model(cfg), cfg)
        restored.load(path)
        assert restored.global_step == 3
        ref_state = trainer.optimizer.state_dict()["state"]
        new_state = restored.optimizer.state_dict()["state"]
        assert set(ref_state) == set(new_state)
        for pid in ref_state:
            for key in ("exp_avg", "exp_avg_sq", "step"):
                a = ref_state[pid][key]
                b = new_state[pid][key]
                assert torch.equal(
                    torch.as_tensor(a, dtype=torch.float32),
                    torch.as_tensor(b, dtype=torch.float32),
                ), (pid, key)
        # and both take an identical next step
        la = trainer.step_batch(batch)
        lb = restored.step_batch(batch)
        assert la == lb

    def test_resume_reproduces_unbroken_run(self, tmp_path):
        cfg = tiny_cfg(augment=True, flip_prob=0.5, epochs=3)
        samples = make_samples(4)

        torch.manual_seed(7)
        solo = Trainer(build_model(cfg), cfg, out_dir=tmp_path / "solo")
        solo.fit(samples, epochs=3, log_path=tmp_path / "solo.csv")

        torch.manual_seed(7)
        first = Trainer(build_model(cfg), cfg, out_dir=tmp_path / "split")
        first.fit(samples, epochs=1, log_path=tmp_path / "split.csv")
        second = Trainer(build_model(cfg), cfg, out_dir=tmp_path / "split")
        second.load(tmp_path / "split" / "ckpt_latest.efd")
        assert second.epoch == 1
        second.fit(samples, epochs=3, log_path=tmp_path / "split.csv")

        solo_rows = (tmp_path / "solo.csv").read_text().splitlines()
        split_rows = (tmp_path / "split.csv").read_text().splitlines()
        assert len(solo_rows) == len(split_rows) == 1 + 3 * 2  # header + steps
        assert solo_rows == split_rows

    def test_max_steps_and_early_stop(self, tmp_path):
        cfg = tiny_cfg(augment=False, epochs=50)
        torch.manual_seed(0)
        trainer = Trainer(build_model(cfg), cfg)
        report = trainer.fit(make_samples(2), max_steps=2)
        assert report["steps"] == 2 and report["stopped_early"]
        report = trainer.fit(make_samples(2), stop_below_fraction=1e9)
        assert report["steps"] == 1 and report["stopped_early"]

    def test_empty_samples_rejected(self):
        cfg = tiny_cfg()
        with pytest.raises(ConfigError, match="no training samples"):
            Trainer(build_model(cfg), cfg).fit([])


class TestEvaluation:
    def test_use_gt_scores_zero_error(self):
        cfg = tiny_cfg()
        model = build_model(cfg)
        grouped = {"seq000": make_samples(1), "seq001": make_samples(1, seed=5)}
        records, dumps = evaluate_samples(model, grouped, cfg, use_gt=True)
        assert set(records) == {"seq000", "seq001", "all"}
        for rec in records.values():
            assert rec["abs_rel"] == 0.0 and rec["delta_1"] == 1.0
        assert set(dumps) == {"seq000_s00", "seq001_s00"}
        assert dumps["seq000_s00"].shape == (2, 16, 16)

    def test_predict_sample_positive_depth(self):
        cfg = tiny_cfg()
        torch.manual_seed(0)
        model = build_model(cfg)
        pred = predict_sample(model, make_samples(1)[0], cfg)
        assert pred.shape == (2, 1, 16, 16)
        assert float(pred.min()) > 0.0
        assert float(pred.max()) <= cfg.d_max * 1.0001

    def test_zero_events_config_blanks_prediction_inputs(self):
        cfg = tiny_cfg()
        torch.manual_seed(0)
        model = build_model(cfg)
        sample = make_samples(1)[0]
        blanked = SequenceSample(
            sample.frames, torch.zeros_like(sample.voxels), sample.gt_depth,
            sample.gt_valid, sample.rasters,
        )
        a = predict_sample(model, sample, cfg.replace(zero_events=True))
        b = predict_sample(model, blanked, cfg)
        assert torch.equal(a, b)
