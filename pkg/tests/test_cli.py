"""End-to-end command line tests (in-process via main())."""

import json

import numpy as np
import pytest
import torch

from efdepth.checkpoint import load_model, save_model
from efdepth.cli import main
from efdepth.config import RunConfig
from efdepth.io import load_depth_raster, load_sequence_dir
from efdepth.train import build_model

TINY = {
    "resolution": 16,
    "seq_len": 2,
    "sequences": 1,
    "frames_per_scene": 4,
    "channels": [4, 6, 8],
    "patches": [2, 4],
    "n_blocks": 2,
    "state_channels": 4,
    "decoder_channels": [8, 6, 5],
    "neighbors": 4,
    "offset_radius": 3.0,
    "prop_iters": 2,
    "batch_size": 2,
    "epochs": 1,
    "loss_scales": 2,
    "augment": False,
}


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY))
    return str(path)


@pytest.fixture()
def tiny_dataset(tmp_path, tiny_config):
    out = tmp_path / "data"
    assert main(["synth", "--config", tiny_config, "--out", str(out)]) == 0
    return str(out)


class TestSynth:
    def test_writes_dataset_and_stats(self, tmp_path, tiny_config, capsys):
        out = tmp_path / "ds"
        assert main(["synth", "--config", tiny_config, "--out", str(out)]) == 0
        text = capsys.readouterr().out
        assert "wrote 1 sequences" in text
        assert "events total:" in text
        assert "mean frame edge energy:" in text
        loaded = load_sequence_dir(out / "seq000")
        assert loaded["frames"].shape == (4, 16, 16)

    def test_same_seed_byte_identical(self, tmp_path, tiny_config):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["synth", "--config", tiny_config, "--out", str(a), "--seed", "5"])
        main(["synth", "--config", tiny_config, "--out", str(b), "--seed", "5"])
        assert (a / "seq000" / "events.csv").read_bytes() == (
            b / "seq000" / "events.csv"
        ).read_bytes()

    def test_low_gain_lowers_edge_energy(self, tmp_path, tiny_config, capsys):
        def energy(out, gain):
            main(["synth", "--config", tiny_config, "--out", out, "--gain", gain])
            line = [
                l for l in capsys.readouterr().out.splitlines() if "edge energy" in l
            ][0]
            return float(line.rsplit(":", 1)[1])

        bright = energy(str(tmp_path / "g1"), "1.0")
        dim = energy(str(tmp_path / "g02"), "0.2")
        assert dim < bright

    def test_bad_gain_exits_2(self, tmp_path, tiny_config, capsys):
        code = main(["synth", "--config", tiny_config, "--out",
                     str(tmp_path / "x"), "--gain", "0"])
        assert code == 2
        assert "error:" in capsys.readouterr().err


class TestTrain:
    def test_zero_epochs_checkpoint_is_init(self, tmp_path, tiny_config, tiny_dataset):
        out = tmp_path / "run"
        code = main(["train", "--config", tiny_config, "--dataset", tiny_dataset,
                     "--out", str(out), "--epochs", "0"])
        assert code == 0
        cfg = RunConfig(**{k: tuple(v) if isinstance(v, list) else v
                           for k, v in TINY.items()})
        torch.manual_seed(cfg.seed)
        reference = build_model(cfg)
        loaded = build_model(cfg)
        load_model(out / "ckpt_latest.efd", loaded)
        for key, ref in reference.state_dict().items():
            assert torch.equal(loaded.state_dict()[key], ref), key

    def test_one_epoch_writes_logs(self, tmp_path, tiny_config, tiny_dataset, capsys):
        out = tmp_path / "run"
        code = main(["train", "--config", tiny_config, "--dataset", tiny_dataset,
                     "--out", str(out)])
        assert code == 0
        text = capsys.readouterr().out
        assert "trained to epoch 1" in text
        rows = (out / "loss.csv").read_text().splitlines()
        assert rows[0] == "step,mse,grad,total"
        assert len(rows) == 2  # one batch of two samples
        assert (out / "ckpt_latest.efd").is_file()
        assert (out / "ckpt_epoch_0001.efd").is_file()
        assert (out / "loss_curve.png").is_file()

    def test_resume_continues(self, tmp_path, tiny_config, tiny_dataset, capsys):
        out = tmp_path / "run"
        main(["train", "--config", tiny_config, "--dataset", tiny_dataset,
              "--out", str(out)])
        capsys.readouterr()
        code = main(["train", "--config", tiny_config, "--dataset", tiny_dataset,
                     "--out", str(out), "--resume", str(out / "ckpt_latest.efd"),
                     "--epochs", "2"])
        assert code == 0
        text = capsys.readouterr().out
        assert "resumed from" in text and "at epoch 1" in text
        assert "trained to epoch 2" in text

    def test_missing_dataset_exits_2(self, tmp_path, tiny_config, capsys):
        code = main(["train", "--config", tiny_config, "--dataset",
                     str(tmp_path / "nope"), "--out", str(tmp_path / "run")])
        assert code == 2
        assert "error:" in capsys.readouterr().err


class TestEval:
    def test_use_gt_zero_errors(self, tmp_path, tiny_config, tiny_dataset, capsys):
        out = tmp_path / "eval"
        code = main(["eval", "--config", tiny_config, "--dataset", tiny_dataset,
                     "--out", str(out), "--use-gt"])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert report["use_gt"] is True
        metrics = report["metrics"]
        assert set(metrics) == {"seq000", "all"}
        for rec in metrics.values():
            assert set(rec) == {
                "avg_abs_error", "abs_rel", "sq_rel", "rmse", "rmse_log",
                "si_log", "delta_1", "delta_2", "delta_3",
            }
            assert rec["abs_rel"] == 0.0
            assert rec["rmse"] == 0.0
            assert rec["delta_1"] == 1.0
        assert (out / "report.txt").is_file()
        assert "abs_rel" in capsys.readouterr().out

    def test_use_gt_dumped_predictions_match_gt(self, tmp_path, tiny_config,
                                                tiny_dataset):
        out = tmp_path / "eval"
        main(["eval", "--config", tiny_config, "--dataset", tiny_dataset,
              "--out", str(out), "--use-gt"])
        data = load_sequence_dir(tiny_dataset + "/seq000")
        for j in range(2):  # two samples of two frames each
            for k in range(2):
                dump = load_depth_raster(out / "pred" / "seq000" / f"s{j:02d}_k{k:02d}.f32")
                gt = data["depths"][2 * j + k]
                np.testing.assert_allclose(
                    dump.data[gt.valid], gt.data[gt.valid], rtol=1e-6
                )
            assert (out / f"seq000_s{j:02d}.png").is_file()

    def test_checkpoint_path(self, tmp_path, tiny_config, tiny_dataset):
        cfg = RunConfig(**{k: tuple(v) if isinstance(v, list) else v
                           for k, v in TINY.items()})
        torch.manual_seed(0)
        ckpt = tmp_path / "m.efd"
        save_model(ckpt, build_model(cfg))
        out = tmp_path / "eval"
        code = main(["eval", "--config", tiny_config, "--dataset", tiny_dataset,
                     "--out", str(out), "--checkpoint", str(ckpt)])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert report["checkpoint"] == str(ckpt)
        assert report["metrics"]["all"]["abs_rel"] > 0.0

    def test_needs_checkpoint_or_use_gt(self, tmp_path, tiny_config, tiny_dataset,
                                        capsys):
        code = main(["eval", "--config", tiny_config, "--dataset", tiny_dataset,
                     "--out", str(tmp_path / "eval")])
        assert code == 2
        assert "checkpoint" in capsys.readouterr().err


class TestInfer:
    def test_writes_per_frame_depth(self, tmp_path, tiny_config, tiny_dataset):
        cfg = RunConfig(**{k: tuple(v) if isinstance(v, list) else v
                           for k, v in TINY.items()})
        torch.manual_seed(0)
        ckpt = tmp_path / "m.efd"
        save_model(ckpt, build_model(cfg))
        out = tmp_path / "infer"
        code = main(["infer", "--config", tiny_config,
                     "--sequence", tiny_dataset + "/seq000",
                     "--out", str(out), "--checkpoint", str(ckpt)])
        assert code == 0
        for k in range(4):
            raster = load_depth_raster(out / f"depth_{k:06d}.f32")
            assert raster.data.shape == (16, 16)
            assert raster.valid.all() and raster.data.min() > 0
            assert (out / f"depth_{k:06d}.png").is_file()


class TestGradcheckCommand:
    def test_exit_codes_and_lines(self, capsys, monkeypatch):
        from efdepth.gradcheck import CheckResult

        ok = [CheckResult("a", True, 0.0, 1, ""), CheckResult("b", True, 0.0, 1, "")]
        monkeypatch.setattr("efdepth.gradcheck.run_all", lambda **kw: ok)
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 2 and "2/2 checks passed" in out

        bad = ok + [CheckResult("c", False, 1.0, 1, "wrong")]
        monkeypatch.setattr("efdepth.gradcheck.run_all", lambda **kw: bad)
        assert main(["gradcheck", "--corrupt-fixture"]) == 1
        out = capsys.readouterr().out
        assert "FAIL" in out and "2/3 checks passed" in out


class TestConfigHandling:
    def test_unknown_config_key_exits_2(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text('{"not_a_field": 1}')
        code = main(["synth", "--config", str(path), "--out", str(tmp_path / "o")])
        assert code == 2
        assert "not_a_field" in capsys.readouterr().err

    def test_malformed_json_exits_2(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text("{oops")
        code = main(["synth", "--config", str(path), "--out", str(tmp_path / "o")])
        assert code == 2

    def test_cutoffs_flag_parsed(self, tmp_path, tiny_config, tiny_dataset):
        out = tmp_path / "eval"
        code = main(["eval", "--config", tiny_config, "--dataset", tiny_dataset,
                     "--out", str(out), "--use-gt", "--cutoffs", "5,15"])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert set(report["metrics"]["all"]["avg_abs_error"]) == {"5", "15"}
