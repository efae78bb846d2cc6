"""Verification tests: hand-checked confusion metrics and report assembly."""

import csv

import numpy as np
import pytest

from nowquant.data import NormalizationStats
from nowquant.errors import ContractError, DimensionError
from nowquant.model import ModelConfig, QuantileSpec
from nowquant.verification import (Counts, accumulate_confusion, binarize,
                                   csi, empirical_coverage, eval_events,
                                   eval_regression, far, mcc, pod,
                                   split_heads, write_curves_csv,
                                   write_summary_csv)


# ---------------------------------------------------------------------------
# confusion counters and point metrics
# ---------------------------------------------------------------------------


class TestCounts:
    def test_hand_case(self):
        # 3 hits, 1 false alarm, 2 misses: CSI 0.5, POD 0.6, FAR 0.25
        c = Counts(tp=3, fp=1, fn=2, tn=10)
        assert csi(c) == 0.5
        assert pod(c) == 0.6
        assert far(c) == 0.25

    def test_pod_hand_case(self):
        c = Counts(tp=4, fp=3, fn=1, tn=0)
        assert pod(c) == 0.8

    def test_perfect_predictor(self):
        c = Counts(tp=7, fp=0, fn=0, tn=9)
        assert csi(c) == 1.0 and pod(c) == 1.0 and far(c) == 0.0
        assert mcc(c) == 1.0

    def test_perfectly_wrong_predictor(self):
        c = Counts(tp=0, fp=5, fn=5, tn=0)
        assert mcc(c) == -1.0

    def test_zero_denominators_yield_none(self):
        nothing_predicted_nothing_observed = Counts(tn=10)
        assert csi(nothing_predicted_nothing_observed) is None
        assert pod(nothing_predicted_nothing_observed) is None
        assert far(nothing_predicted_nothing_observed) is None

    def test_mcc_zero_fallback(self):
        # one all-negative side zeroes a product factor
        assert mcc(Counts(tn=10)) == 0.0
        assert mcc(Counts(tp=3, fn=2)) == 0.0

    def test_all_dry_forecast_on_wet_truth(self):
        # prediction never fires: POD 0, CSI 0, FAR undefined
        c = Counts(tp=0, fp=0, fn=8, tn=2)
        assert pod(c) == 0.0
        assert csi(c) == 0.0
        assert far(c) is None

    def test_mcc_integer_product_is_exact(self):
        # large counts stay exact because the product is integer math
        c = Counts(tp=10**6, fp=1, fn=2, tn=10**6)
        assert abs(mcc(c) - 1.0) < 1e-5

    def test_accumulation_and_total(self):
        c = Counts()
        accumulate_confusion(np.array([True, True, False, False]),
                             np.array([True, False, True, False]), c)
        assert (c.tp, c.fp, c.fn, c.tn) == (1, 1, 1, 1)
        accumulate_confusion(np.array([True]), np.array([True]), c)
        assert c.total() == 5

    def test_mask_shape_mismatch(self):
        with pytest.raises(DimensionError):
            accumulate_confusion(np.zeros(3, bool), np.zeros(4, bool), Counts())


class TestBinarize:
    def test_threshold_is_inclusive(self):
        field = np.array([0.49, 0.5, 0.51, 20.0, 19.999])
        np.testing.assert_array_equal(binarize(field, 0.5), [False, True, True, True, True])
        np.testing.assert_array_equal(binarize(field, 20.0), [False, False, False, True, False])


class TestBruteForceRecount:
    def test_pooled_metrics_match_per_pixel_recount(self):
        # 100 random mask pairs, exact agreement with a literal loop
        rng = np.random.default_rng(0)
        for _ in range(100):
            shape = (rng.integers(2, 6), rng.integers(2, 6))
            pred = rng.random(shape) < 0.4
            obs = rng.random(shape) < 0.3
            c = Counts()
            accumulate_confusion(pred, obs, c)
            tp = fp = fn = tn = 0
            for i in range(shape[0]):
                for j in range(shape[1]):
                    if pred[i, j] and obs[i, j]:
                        tp += 1
                    elif pred[i, j]:
                        fp += 1
                    elif obs[i, j]:
                        fn += 1
                    else:
                        tn += 1
            assert (c.tp, c.fp, c.fn, c.tn) == (tp, fp, fn, tn)
            for got, expect_num, expect_den in (
                    (csi(c), tp, tp + fp + fn),
                    (pod(c), tp, tp + fn),
                    (far(c), fp, tp + fp)):
                if expect_den == 0:
                    assert got is None
                else:
                    assert got == expect_num / expect_den

    def test_order_invariance(self):
        rng = np.random.default_rng(1)
        masks = [(rng.random((4, 4)) < 0.5, rng.random((4, 4)) < 0.5) for _ in range(10)]
        a = Counts()
        for pm, om in masks:
            accumulate_confusion(pm, om, a)
        b = Counts()
        for pm, om in reversed(masks):
            accumulate_confusion(pm, om, b)
        assert (a.tp, a.fp, a.fn, a.tn) == (b.tp, b.fp, b.fn, b.tn)


class TestMetricProperties:
    def test_csi_never_exceeds_pod(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            c = Counts(tp=int(rng.integers(0, 20)), fp=int(rng.integers(0, 20)),
                       fn=int(rng.integers(0, 20)), tn=int(rng.integers(0, 20)))
            s, p = csi(c), pod(c)
            if s is not None and p is not None:
                assert s <= p + 1e-12

    def test_threshold_monotonicity(self):
        # masks nest as the threshold rises, so event counts can only shrink
        rng = np.random.default_rng(3)
        field = rng.uniform(0, 30, (6, 6))
        previous = None
        for thr in (0.5, 10.0, 20.0):
            mask = binarize(field, thr)
            if previous is not None:
                assert not np.any(mask & ~previous)  # mask subset of previous
            previous = mask


# ---------------------------------------------------------------------------
# regression metrics and coverage
# ---------------------------------------------------------------------------


class TestRegression:
    def test_exact_and_constant_offset(self):
        y = np.zeros((2, 1, 2, 2), np.float32)
        assert eval_regression(y, y) == (0.0, 0.0)
        pred = np.full_like(y, 0.1)
        m, a = eval_regression(pred, y)
        assert m == pytest.approx(0.01, rel=1e-6)
        assert a == pytest.approx(0.1, rel=1e-6)

    def test_matches_brute_force_accumulator(self):
        rng = np.random.default_rng(4)
        pred = rng.normal(size=(5, 2, 3, 3)).astype(np.float32)
        obs = rng.normal(size=(5, 2, 3, 3)).astype(np.float32)
        m, a = eval_regression(pred, obs)
        se = ae = 0.0
        for idx in np.ndindex(pred.shape):
            d = float(pred[idx]) - float(obs[idx])
            se += d * d
            ae += abs(d)
        assert m == pytest.approx(se / pred.size, rel=1e-12)
        assert a == pytest.approx(ae / pred.size, rel=1e-12)

    def test_errors(self):
        with pytest.raises(DimensionError):
            eval_regression(np.zeros((2, 2)), np.zeros((2, 3)))
        with pytest.raises(ContractError):
            eval_regression(np.zeros((0, 2)), np.zeros((0, 2)))


class TestCoverage:
    def test_fraction_at_or_below(self):
        pred = np.array([1.0, 1.0, 1.0, 1.0])
        targets = np.array([0.5, 1.0, 2.0, 0.0])
        assert empirical_coverage(pred, targets) == 0.75

    def test_extremes(self):
        t = np.array([1.0, 2.0])
        assert empirical_coverage(np.full(2, 10.0), t) == 1.0
        assert empirical_coverage(np.zeros(2), t) == 0.0


# ---------------------------------------------------------------------------
# head splitting
# ---------------------------------------------------------------------------


SPEC3 = QuantileSpec((0.5, 0.9, 0.95), (1.0, 0.5, 0.5))


def quantile_config():
    return ModelConfig(input_frames=4, lead_times=3, quantiles=SPEC3,
                       grid_h=16, grid_w=16)


class TestSplitHeads:
    def test_deterministic_single_head(self):
        cfg = ModelConfig(input_frames=4, lead_times=3, grid_h=16, grid_w=16)
        out = np.random.default_rng(0).normal(size=(2, 3, 16, 16)).astype(np.float32)
        heads = split_heads(out, cfg)
        assert list(heads) == ["det"]
        np.testing.assert_array_equal(heads["det"], out)

    def test_quantile_heads_lead_major(self):
        out = np.zeros((1, 9, 16, 16), np.float32)
        for c in range(9):
            out[0, c] = c
        heads = split_heads(out, quantile_config())
        assert list(heads) == ["q0.5", "q0.9", "q0.95"]
        assert [int(heads["q0.5"][0, l, 0, 0]) for l in range(3)] == [0, 3, 6]
        assert [int(heads["q0.95"][0, l, 0, 0]) for l in range(3)] == [2, 5, 8]

    def test_channel_count_checked(self):
        with pytest.raises(ContractError):
            split_heads(np.zeros((1, 8, 16, 16), np.float32), quantile_config())


# ---------------------------------------------------------------------------
# event evaluation end to end
# ---------------------------------------------------------------------------


def hand_dataset():
    """2 samples, 2 leads, 2x2 grid, train_max 2.0, 12 steps/h: mm/h = 24x."""
    stats = NormalizationStats(train_max=2.0)
    targets = np.array([
        [[[0.0, 0.5], [1.0, 0.1]],
         [[0.0, 0.0], [0.9, 0.8]]],
        [[[0.4, 0.4], [0.0, 1.0]],
         [[0.2, 0.0], [0.0, 0.6]]],
    ], np.float32)
    preds = np.array([
        [[[0.0, 0.6], [0.9, 0.0]],
         [[0.1, 0.0], [1.0, 0.2]]],
        [[[0.5, 0.3], [0.0, 0.9]],
         [[0.0, 0.1], [0.4, 0.7]]],
    ], np.float32)
    return stats, targets, preds


class TestEvalEvents:
    def test_counts_match_hand_binarisation(self):
        stats, targets, preds = hand_dataset()
        rep = eval_events("m", {"det": preds}, targets, stats,
                          steps_per_hour=12, thresholds=(10.0,))
        head = rep.heads[0]
        scale = 24.0
        for lead in (1, 2):
            pm = preds[:, lead - 1] * scale >= 10.0
            om = targets[:, lead - 1] * scale >= 10.0
            c = head.counts[(10.0, lead)]
            assert c.tp == int((pm & om).sum())
            assert c.fp == int((pm & ~om).sum())
            assert c.fn == int((~pm & om).sum())
            assert c.tn == int((~pm & ~om).sum())
            assert c.total() == 8

    def test_lead_minutes(self):
        stats, targets, preds = hand_dataset()
        rep = eval_events("m", {"det": preds}, targets, stats, steps_per_hour=12)
        assert rep.lead_minutes == {1: 5, 2: 10}
        rep = eval_events("m", {"det": preds}, targets, stats, steps_per_hour=4)
        assert rep.lead_minutes == {1: 15, 2: 30}

    def test_summary_averages_leads_skipping_none(self):
        stats, targets, preds = hand_dataset()
        rep = eval_events("m", {"det": preds}, targets, stats, thresholds=(10.0, 20.0))
        head = rep.heads[0]
        for thr in (10.0, 20.0):
            for metric in ("csi", "pod", "far", "mcc"):
                per_lead = [head.curves[(thr, l)][metric] for l in (1, 2)]
                values = [v for v in per_lead if v is not None]
                expect = sum(values) / len(values) if values else None
                assert head.summary[thr][metric] == expect

    def test_perfect_predictions(self):
        stats, targets, _ = hand_dataset()
        rep = eval_events("m", {"det": targets.copy()}, targets, stats, thresholds=(10.0,))
        head = rep.heads[0]
        assert head.mse == 0.0 and head.mae == 0.0
        s = head.summary[10.0]
        assert s["csi"] == 1.0 and s["pod"] == 1.0 and s["far"] == 0.0 and s["mcc"] == 1.0

    def test_head_shape_mismatch(self):
        stats, targets, preds = hand_dataset()
        with pytest.raises(DimensionError):
            eval_events("m", {"det": preds[:, :1]}, targets, stats)

    def test_empty_heads_rejected(self):
        stats, targets, _ = hand_dataset()
        with pytest.raises(ContractError):
            eval_events("m", {}, targets, stats)


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------


class TestCsvOutput:
    def test_summary_is_lead_average_of_curves(self, tmp_path):
        stats, targets, preds = hand_dataset()
        rep = eval_events("det_model", {"det": preds}, targets, stats)
        sp = tmp_path / "summary.csv"
        cp = tmp_path / "curves.csv"
        write_summary_csv([rep], sp)
        write_curves_csv([rep], cp)

        with open(cp) as fh:
            curves = list(csv.DictReader(fh))
        with open(sp) as fh:
            summary = list(csv.DictReader(fh))
        assert len(curves) == 3 * 2   # thresholds x leads
        assert len(summary) == 3

        for srow in summary:
            matching = [r for r in curves if r["threshold"] == srow["threshold"]]
            assert len(matching) == 2
            for metric in ("csi", "pod", "far", "mcc"):
                cells = [r[metric] for r in matching if r[metric] != ""]
                if not cells:
                    assert srow[metric] == ""
                else:
                    mean = sum(float(v) for v in cells) / len(cells)
                    assert float(srow[metric]) == pytest.approx(mean, rel=1e-6)

    def test_none_becomes_empty_cell(self, tmp_path):
        stats = NormalizationStats(train_max=1.0)
        targets = np.zeros((1, 1, 2, 2), np.float32)
        preds = np.zeros((1, 1, 2, 2), np.float32)
        rep = eval_events("m", {"det": preds}, targets, stats, thresholds=(10.0,))
        p = tmp_path / "summary.csv"
        write_summary_csv([rep], p)
        rows = list(csv.DictReader(open(p)))
        assert rows[0]["csi"] == "" and rows[0]["pod"] == "" and rows[0]["far"] == ""
        assert rows[0]["mcc"] == "0"

    def test_cell_format_is_stable(self, tmp_path):
        stats, targets, preds = hand_dataset()
        rep = eval_events("m", {"det": preds}, targets, stats)
        p = tmp_path / "summary.csv"
        write_summary_csv([rep], p)
        first = p.read_bytes()
        write_summary_csv([rep], p)
        assert p.read_bytes() == first
        header = first.split(b"\r\n")[0]
        assert header == b"model,output,threshold,csi,pod,far,mcc,mse,mae"
