"""Loss and metric tests against scalar-loop oracles."""

import json
import math

import numpy as np
import pytest
import torch

import efdepth.objectives as obj
from efdepth.errors import ConfigError, DataError
from efdepth.objectives import (
    DepthRaster,
    METRIC_KEYS,
    denormalize_depth_tensor,
    depth_metrics,
    flatten_record,
    format_metric_table,
    grad_matching_loss,
    log_denormalize,
    log_normalize,
    metrics_to_json,
    mse_loss,
    normalize_depth_tensor,
    sequence_loss_terms,
    total_loss,
)


def oracle_metrics(pred, gt, valid, cutoffs=(10.0, 20.0, 30.0)):
    """Python-loop reference for the metric record."""
    ps, gs = [], []
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            if valid[i, j]:
                ps.append(max(float(pred[i, j]), 1e-9))
                gs.append(float(gt[i, j]))
    n = len(ps)
    abs_rel = sum(abs(p - g) / g for p, g in zip(ps, gs)) / n
    sq_rel = sum((p - g) ** 2 / g for p, g in zip(ps, gs)) / n
    rmse = math.sqrt(sum((p - g) ** 2 for p, g in zip(ps, gs)) / n)
    ds = [math.log(p) - math.log(g) for p, g in zip(ps, gs)]
    rmse_log = math.sqrt(sum(d * d for d in ds) / n)
    si_log = sum(d * d for d in ds) / n - (sum(ds) / n) ** 2
    ratios = [max(p / g, g / p) for p, g in zip(ps, gs)]
    rec = {
        "abs_rel": abs_rel, "sq_rel": sq_rel, "rmse": rmse,
        "rmse_log": rmse_log, "si_log": si_log,
        "delta_1": sum(r < 1.25 for r in ratios) / n,
        "delta_2": sum(r < 1.25**2 for r in ratios) / n,
        "delta_3": sum(r < 1.25**3 for r in ratios) / n,
        "avg_abs_error": {},
    }
    for c in cutoffs:
        sel = [(p, g) for p, g in zip(ps, gs) if g <= c]
        rec["avg_abs_error"][f"{c:g}"] = (
            sum(abs(p - g) for p, g in sel) / len(sel) if sel else float("nan")
        )
    return rec


def compare_records(a, b, atol):
    for key in METRIC_KEYS:
        if key == "avg_abs_error":
            for c in a[key]:
                assert abs(a[key][c] - b[key][c]) <= atol, (key, c)
        else:
            assert abs(a[key] - b[key]) <= atol, key


class TestLogSpace:
    @pytest.mark.parametrize("alpha,d_max", [(3.7, 80.0), (5.7, 1000.0)])
    def test_tensor_roundtrip(self, alpha, d_max):
        rng = np.random.default_rng(0)
        floor = d_max * math.exp(-alpha) * 1.01
        depth = torch.from_numpy(rng.uniform(floor, d_max, (64, 64)))
        v = normalize_depth_tensor(depth, alpha, d_max)
        back = denormalize_depth_tensor(v, alpha, d_max)
        assert float((back - depth).abs().max()) <= 1e-9 * d_max
        assert float(v.min()) >= 0.0 and float(v.max()) <= 1.0

    @pytest.mark.parametrize("alpha,d_max", [(3.7, 80.0), (5.7, 1000.0)])
    def test_raster_roundtrip(self, alpha, d_max):
        rng = np.random.default_rng(1)
        floor = d_max * math.exp(-alpha) * 1.01
        data = rng.uniform(floor, d_max, (32, 32))
        valid = rng.random((32, 32)) > 0.2
        raster = DepthRaster(data=data, valid=valid, alpha=alpha, d_max=d_max)
        back = log_denormalize(log_normalize(raster))
        np.testing.assert_allclose(back.data[valid], data[valid], atol=1e-9 * d_max)
        np.testing.assert_array_equal(back.valid, valid)

    def test_below_floor_invalidated(self):
        alpha, d_max = 3.7, 80.0
        floor = d_max * math.exp(-alpha)
        data = np.array([[floor * 0.5, floor * 2.0]])
        raster = DepthRaster(data=data, valid=np.ones((1, 2), bool),
                             alpha=alpha, d_max=d_max)
        out = log_normalize(raster)
        assert not out.valid[0, 0] and out.data[0, 0] == 0.0
        assert out.valid[0, 1]

    def test_above_dmax_clamps_to_one(self):
        raster = DepthRaster(data=np.array([[200.0]]), valid=np.ones((1, 1), bool),
                             alpha=3.7, d_max=80.0)
        assert log_normalize(raster).data[0, 0] == 1.0

    def test_hand_value(self):
        # d = d_max gives v = 1; d = d_max * e^-alpha gives v = 0
        v = normalize_depth_tensor(torch.tensor([80.0, 80.0 * math.exp(-3.7)]),
                                   3.7, 80.0)
        assert float(v[0]) == pytest.approx(1.0, abs=1e-12)
        assert float(v[1]) == pytest.approx(0.0, abs=1e-7)

    def test_space_checks(self):
        raster = DepthRaster(data=np.ones((2, 2)), valid=np.ones((2, 2), bool),
                             alpha=3.7, d_max=80.0)
        with pytest.raises(ConfigError):
            log_denormalize(raster)  # still meters
        with pytest.raises(ConfigError):
            log_normalize(log_normalize(raster))

    def test_nonpositive_valid_depth_rejected(self):
        raster = DepthRaster(data=np.array([[0.0]]), valid=np.ones((1, 1), bool),
                             alpha=3.7, d_max=80.0)
        with pytest.raises(DataError):
            log_normalize(raster)


class TestLosses:
    def test_mse_hand_value(self):
        residual = torch.tensor([[1.0, -2.0], [3.0, 100.0]])
        valid = torch.tensor([[True, True], [True, False]])
        assert float(mse_loss(residual, valid)) == pytest.approx((1 + 4 + 9) / 3)

    def test_mse_empty_counts_and_zeroes(self):
        before = obj.empty_valid_count
        out = mse_loss(torch.rand(4, 4), torch.zeros(4, 4, dtype=torch.bool))
        assert float(out) == 0.0
        assert obj.empty_valid_count == before + 1

    def test_grad_loss_zero_on_constant_residual(self):
        residual = torch.full((1, 1, 16, 16), 0.7)
        valid = torch.ones(1, 1, 16, 16, dtype=torch.bool)
        assert float(grad_matching_loss(residual, valid, 3)) == 0.0

    def test_grad_loss_single_scale_hand_value(self):
        # ramp x/8 on a wide strip: interior |Gx| = 8 * (1/8) = 1, |Gy| = 0
        w = 16
        residual = (torch.arange(w, dtype=torch.float32) / 8).expand(8, w).clone()
        valid = torch.ones(8, w, dtype=torch.bool)
        out = grad_matching_loss(residual, valid, num_scales=1)
        # replicate padding halves the response on the first/last columns
        expected = ((w - 2) * 1.0 + 2 * 0.5) / w
        assert float(out) == pytest.approx(expected, rel=1e-5)

    def test_grad_loss_scales_stop_below_2px(self):
        residual = torch.rand(1, 1, 4, 4)
        valid = torch.ones(1, 1, 4, 4, dtype=torch.bool)
        # scales: 4x4, 2x2, then 1x1 is skipped
        a = grad_matching_loss(residual, valid, num_scales=2)
        b = grad_matching_loss(residual, valid, num_scales=6)
        assert float(a) == float(b)

    def test_grad_loss_invalid_pixels_do_not_leak(self):
        residual = torch.zeros(1, 1, 8, 8)
        residual[0, 0, 3, 3] = 1e6
        valid = torch.ones(1, 1, 8, 8, dtype=torch.bool)
        valid[0, 0, 3, 3] = False
        out = grad_matching_loss(residual, valid, num_scales=2)
        # the spike is zeroed before pooling; remaining field is constant 0
        assert float(out) == 0.0

    def test_total_loss_combines_terms(self):
        torch.manual_seed(0)
        preds = [torch.rand(1, 1, 8, 8) for _ in range(3)]
        gts = [torch.rand(1, 1, 8, 8) for _ in range(3)]
        valids = [torch.ones(1, 1, 8, 8, dtype=torch.bool)] * 3
        terms = sequence_loss_terms(preds, gts, valids, num_scales=2)
        expected = sum(float(m) + 0.25 * float(g) for m, g in terms)
        out = total_loss(preds, gts, valids, lam=0.25, num_scales=2)
        assert float(out) == pytest.approx(expected, rel=1e-6)

    def test_total_loss_length_mismatch(self):
        with pytest.raises(ConfigError):
            total_loss([torch.rand(1, 1, 4, 4)], [], [])

    def test_grad_loss_bad_scales(self):
        with pytest.raises(ConfigError):
            grad_matching_loss(torch.rand(2, 2), torch.ones(2, 2, dtype=torch.bool), 0)


class TestMetrics:
    def test_matches_oracle_on_random_pairs(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            h, w = rng.integers(4, 12, 2)
            gt = rng.uniform(1.0, 50.0, (h, w))
            pred = gt * rng.uniform(0.5, 2.0, (h, w))
            valid = rng.random((h, w)) > 0.3
            if not valid.any():
                valid[0, 0] = True
            got = depth_metrics(pred, gt, valid)
            ref = oracle_metrics(pred, gt, valid)
            compare_records(got, ref, 1e-9)

    def test_si_log_scale_invariance(self):
        rng = np.random.default_rng(3)
        gt = rng.uniform(2.0, 40.0, (16, 16))
        pred = gt * rng.uniform(0.7, 1.4, (16, 16))
        valid = np.ones((16, 16), bool)
        base = depth_metrics(pred, gt, valid)["si_log"]
        for c in (0.5, 2.0, 10.0):
            scaled = depth_metrics(c * pred, gt, valid)["si_log"]
            assert abs(scaled - base) <= 1e-9

    def test_perfect_prediction_zero_errors(self):
        gt = np.full((8, 8), 12.5)
        rec = depth_metrics(gt.copy(), gt, np.ones((8, 8), bool))
        for key in ("abs_rel", "sq_rel", "rmse", "rmse_log", "si_log"):
            assert rec[key] == 0.0
        for key in ("delta_1", "delta_2", "delta_3"):
            assert rec[key] == 1.0
        assert rec["avg_abs_error"]["10"] != rec["avg_abs_error"]["10"]  # no gt <= 10
        assert rec["avg_abs_error"]["20"] == 0.0

    def test_cutoff_keys_formatting(self):
        gt = np.full((2, 2), 5.0)
        rec = depth_metrics(gt, gt, np.ones((2, 2), bool), cutoffs=(7.5, 30))
        assert set(rec["avg_abs_error"]) == {"7.5", "30"}

    def test_empty_valid_gives_nan_and_json_null(self):
        rec = depth_metrics(np.ones((2, 2)), np.ones((2, 2)),
                            np.zeros((2, 2), bool))
        assert rec["abs_rel"] != rec["abs_rel"]
        parsed = json.loads(metrics_to_json(rec))
        assert parsed["abs_rel"] is None
        assert parsed["avg_abs_error"]["10"] is None

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DataError):
            depth_metrics(np.ones((2, 2)), np.ones((2, 3)), np.ones((2, 3), bool))

    def test_nonpositive_gt_rejected(self):
        with pytest.raises(DataError):
            depth_metrics(np.ones((2, 2)), np.zeros((2, 2)), np.ones((2, 2), bool))

    def test_metric_keys_complete(self):
        rec = depth_metrics(np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2), bool))
        assert set(rec) == set(METRIC_KEYS)

    def test_flatten_and_table(self):
        gt = np.full((4, 4), 15.0)
        rec = depth_metrics(gt * 1.1, gt, np.ones((4, 4), bool))
        cols = flatten_record(rec)
        names = [c[0] for c in cols]
        assert "abs_rel" in names and any(n.startswith("abs@") for n in names)
        table = format_metric_table({"seq_a": rec, "all": rec})
        assert "seq_a" in table and "abs_rel" in table
