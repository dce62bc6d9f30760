import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchpose import evaluation as E
from patchpose.dataset import PatchPairDataset, PatchPairRecord
from patchpose.histogram import ORIENTATION_BINS, SCALE_BINS

TWO_PI = 2 * math.pi


def grid_dataset(n_keypoints=2):
    """Grid-structured pairs whose patches carry their own target bins.

    Pixel (0, 0) of channel 0 holds the scale bin, channel 1 the orientation
    bin, so a predictor can read them back.
    """
    records, patches = [], []

    def patch(sb, ob):
        p = np.zeros((3, 32, 32), dtype=np.float32)
        p[0, 0, 0], p[1, 0, 0] = sb, ob
        patches.append(p)
        return len(patches) - 1

    for k in range(n_keypoints):
        ref = patch(6, 0)
        kp = (float(k), 0.0)
        for i in range(13):
            b = ref if i == 6 else patch(i, 0)
            records.append(PatchPairRecord(len(records), "x.png", kp, (i - 6) / 3, 0.0, ref, b))
        for j in range(1, 36):
            records.append(PatchPairRecord(len(records), "x.png", kp, 0.0, j * TWO_PI / 36,
                                           ref, patch(6, j)))
    return PatchPairDataset(records, np.stack(patches))


class Oracle:
    def predict(self, patches):
        sb = patches[:, 0, 0, 0].astype(int)
        ob = patches[:, 1, 0, 0].astype(int)
        return np.eye(13)[sb], np.eye(36)[ob]


class FixedBin:
    def __init__(self, sb=3, ob=20):
        self.sb, self.ob = sb, ob

    def predict(self, patches):
        n = len(patches)
        return np.tile(np.eye(13)[self.sb], (n, 1)), np.tile(np.eye(36)[self.ob], (n, 1))


class RandomHist:
    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)

    def predict(self, patches):
        n = len(patches)
        return (self.rng.dirichlet(np.ones(13), n), self.rng.dirichlet(np.ones(36), n))


S6, S3 = (f"{t:.6f}" for t in E.SCALE_THRESHOLDS)
O36, O18 = (f"{t:.6f}" for t in E.ORIENTATION_THRESHOLDS)


class TestScaleError:
    def test_exact_ratio(self):
        assert E.scale_error(1.0, 2.0, 1.0) == 0.0

    def test_no_change_predicted(self):
        assert E.scale_error(1.0, 1.0, 1 / 3) == pytest.approx(1 / 3, abs=1e-15)

    def test_fractional_powers(self):
        assert E.scale_error(2 ** (1 / 3), 2 ** (-1 / 3), -2 / 3) == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("bad", [0.0, -1.0])
    def test_rejects_non_positive(self, bad):
        with pytest.raises(ValueError):
            E.scale_error(bad, 1.0, 0.0)
        with pytest.raises(ValueError):
            E.scale_error(1.0, bad, 0.0)

    def test_common_rescaling_invariance(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(0.25, 4, 1000)
        b = rng.uniform(0.25, 4, 1000)
        d = rng.uniform(-2, 2, 1000)
        c = np.exp(rng.uniform(-5, 5, 1000))
        diff = np.abs(E.scale_error(a, b, d) - E.scale_error(c * a, c * b, d))
        assert diff.max() < 1e-12


class TestOrientationError:
    def test_exact(self):
        assert E.orientation_error(0.3, 0.3 + math.pi / 18, math.pi / 18) == pytest.approx(0, abs=1e-15)

    def test_wraps_around(self):
        err = E.orientation_error(0.0, 35 * math.pi / 18, math.pi / 18)
        assert err == pytest.approx(math.pi / 9, abs=1e-12)
        assert err < 34 * math.pi / 18 - 1

    def test_symmetric_in_prediction_and_truth(self):
        rng = np.random.default_rng(1)
        p = rng.uniform(0, TWO_PI, 1000)
        d = rng.uniform(0, TWO_PI, 1000)
        np.testing.assert_allclose(E.orientation_error(0.0, p, d), E.orientation_error(0.0, d, p),
                                   atol=1e-12)

    def test_common_offset_invariance(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(0, TWO_PI, 1000)
        b = rng.uniform(0, TWO_PI, 1000)
        d = rng.uniform(0, TWO_PI, 1000)
        off = rng.uniform(-20, 20, 1000)
        e1 = E.orientation_error(a, b, d)
        e2 = E.orientation_error(np.mod(a + off, TWO_PI), np.mod(b + off, TWO_PI), d)
        assert np.abs(e1 - e2).max() < 1e-12

    @given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0, TWO_PI))
    def test_range(self, a, b, d):
        e = E.orientation_error(a, b, d)
        assert 0.0 <= e <= math.pi + 1e-12


class TestAccuracy:
    def test_oracle_is_perfect(self):
        acc = E.accuracy(E.predict_pairs(Oracle(), grid_dataset()))
        assert all(v == 1.0 for axis in acc.values() for v in axis.values())

    def test_fixed_bin_matches_count(self):
        ds = grid_dataset()
        acc = E.accuracy(E.predict_pairs(FixedBin(), ds))
        _, _, dss, dos = ds.arrays()
        # a constant predictor always predicts a zero difference
        circ = np.minimum(dos, TWO_PI - dos)
        for thr, key in zip(E.SCALE_THRESHOLDS, (S6, S3)):
            expect = np.mean([abs(x) <= thr + 1e-9 for x in dss])
            assert acc["scale"][key] == pytest.approx(expect, abs=1e-15)
        for thr, key in zip(E.ORIENTATION_THRESHOLDS, (O36, O18)):
            expect = np.mean([x <= thr + 1e-9 for x in circ])
            assert acc["orientation"][key] == pytest.approx(expect, abs=1e-15)
        # per keypoint: 36 of 48 pairs have ds = 0, two more sit at +-1/3
        assert acc["scale"][S3] == pytest.approx(38 / 48)
        assert acc["orientation"][O18] == pytest.approx(15 / 48)

    def test_nested_thresholds(self):
        preds = E.predict_pairs(RandomHist(), grid_dataset(3))
        acc = E.accuracy(preds)
        assert acc["scale"][S3] >= acc["scale"][S6]
        assert acc["orientation"][O18] >= acc["orientation"][O36]

    def test_deterministic(self):
        ds = grid_dataset()
        assert (E.accuracy(E.predict_pairs(RandomHist(4), ds))
                == E.accuracy(E.predict_pairs(RandomHist(4), ds)))

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            E.predict_pairs(Oracle(), PatchPairDataset.empty())
        empty = E.PairPredictions(*(np.zeros((0, n)) for n in (13, 13, 36, 36)),
                                  np.zeros(0), np.zeros(0))
        with pytest.raises(ValueError):
            E.accuracy(empty)


class TestTopK:
    def test_k1_equals_accuracy(self):
        preds = E.predict_pairs(RandomHist(1), grid_dataset(3))
        acc = E.accuracy(preds)
        r1 = E.topk_recall(preds, 1)
        assert r1["scale"] == acc["scale"][S3]
        assert r1["orientation"] == acc["orientation"][O18]

    def test_full_k_is_total_recall_on_grid(self):
        preds = E.predict_pairs(RandomHist(2), grid_dataset(2))
        r = E.topk_recall(preds, (SCALE_BINS.count, ORIENTATION_BINS.count))
        assert r == {"scale": 1.0, "orientation": 1.0}
        assert E.topk_recall(preds, 1)["orientation"] < 1.0

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_monotone_in_k(self, seed):
        preds = E.predict_pairs(RandomHist(seed), grid_dataset(1))
        prev = {"scale": 0.0, "orientation": 0.0}
        for k in range(1, 37):
            r = E.topk_recall(preds, (min(k, 13), k))
            assert r["scale"] >= prev["scale"] and r["orientation"] >= prev["orientation"]
            prev = r


class TestRangewise:
    def test_oracle_every_bucket_perfect(self):
        rw = E.rangewise(E.predict_pairs(Oracle(), grid_dataset()))
        assert all(a == 1.0 for a in rw["scale"]["accuracy"])
        assert all(a == 1.0 for a in rw["orientation"]["accuracy"])

    def test_total_is_weighted_mean(self):
        rw = E.rangewise(E.predict_pairs(RandomHist(3), grid_dataset(3)))
        for axis in ("scale", "orientation"):
            t = rw[axis]
            w = sum(c * a for c, a in zip(t["counts"], t["accuracy"]) if a is not None)
            assert t["total"] == pytest.approx(w / sum(t["counts"]), abs=1e-12)

    def test_fixed_bin_nonzero_only_near_zero_shift(self):
        rw = E.rangewise(E.predict_pairs(FixedBin(), grid_dataset()))
        s = rw["scale"]["accuracy"]
        o = rw["orientation"]["accuracy"]
        assert [i for i, a in enumerate(s) if a] == [5, 6, 7]
        assert [i for i, a in enumerate(o) if a] == [0, 1, 35]

    def test_empty_buckets_absent(self):
        ds = grid_dataset(1)
        only_rot = ds.subset(lambda r: r.ds == 0.0)
        rw = E.rangewise(E.predict_pairs(Oracle(), only_rot))
        assert rw["scale"]["accuracy"][0] is None
        assert rw["scale"]["counts"][0] == 0
        assert rw["scale"]["accuracy"][6] == 1.0


class TestReport:
    def test_report_contents(self, tmp_path):
        report = E.evaluate(RandomHist(5), grid_dataset(2))
        d = json.loads(report.to_json())
        assert d["pairs"] == 96
        assert set(d["topk"]) == {"1", "2", "3", "4"}
        for axis in ("scale", "orientation"):
            for v in d["accuracy"][axis].values():
                assert 0.0 <= v <= 1.0
            recalls = [d["topk"][k][axis] for k in "1234"]
            assert recalls == sorted(recalls)
        table = report.table()
        assert "top-k recall" in table and "range scale" in table
        E.plot_rangewise(report, tmp_path / "rw.svg")
        assert (tmp_path / "rw.svg").read_text().lstrip().startswith("<?xml")
