"""Pose error metrics, thresholded accuracy, top-k recall and range-wise tables."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .histogram import (
    ORIENTATION_BINS,
    SCALE_BINS,
    TWO_PI,
    Axis,
    bin_values,
    topk_indices,
)

SCALE_THRESHOLDS = (1.0 / 6.0, 1.0 / 3.0)
ORIENTATION_THRESHOLDS = (math.pi / 36.0, math.pi / 18.0)
# absorbs rounding in differences of bin-center values
THRESH_EPS = 1e-9


def scale_error(fs_a, fs_b, delta_s):
    """``|log2(fs_b / fs_a) - delta_s|``; scale predictions must be positive."""
    fs_a = np.asarray(fs_a, dtype=np.float64)
    fs_b = np.asarray(fs_b, dtype=np.float64)
    if np.any(fs_a <= 0) or np.any(fs_b <= 0):
        raise ValueError("scale predictions must be positive")
    err = np.abs(np.log2(fs_b / fs_a) - delta_s)
    return float(err) if err.ndim == 0 else err


def orientation_error(fo_a, fo_b, delta_o):
    """Circular distance in [0, pi] between the predicted and true rotation."""
    diff = np.mod(np.asarray(fo_b, dtype=np.float64) - fo_a, TWO_PI)
    x = np.mod(np.abs(diff - delta_o), TWO_PI)
    err = np.minimum(x, TWO_PI - x)
    return float(err) if err.ndim == 0 else err


@dataclass
class PairPredictions:
    """Histograms of both patches of every pair plus the true relative poses."""

    scale_a: np.ndarray
    scale_b: np.ndarray
    ori_a: np.ndarray
    ori_b: np.ndarray
    ds: np.ndarray
    do: np.ndarray

    def __len__(self):
        return len(self.ds)


def predict_pairs(predictor, dataset, batch_size: int = 256) -> PairPredictions:
    """Run ``predictor.predict`` over every distinct patch of ``dataset``."""
    a, b, ds, do = dataset.arrays()
    if len(ds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    used = np.unique(np.concatenate([a, b]))
    hs = np.zeros((dataset.patches.shape[0], SCALE_BINS.count))
    ho = np.zeros((dataset.patches.shape[0], ORIENTATION_BINS.count))
    for lo in range(0, len(used), batch_size):
        idx = used[lo:lo + batch_size]
        s, o = predictor.predict(dataset.patches[idx])
        hs[idx] = s
        ho[idx] = o
    return PairPredictions(hs[a], hs[b], ho[a], ho[b], ds, do)


def _argmax_values(h, spec):
    return bin_values(spec, np.argmax(h, axis=-1))


def pair_errors(preds: PairPredictions):
    s_err = scale_error(_argmax_values(preds.scale_a, SCALE_BINS),
                        _argmax_values(preds.scale_b, SCALE_BINS), preds.ds)
    o_err = orientation_error(_argmax_values(preds.ori_a, ORIENTATION_BINS),
                              _argmax_values(preds.ori_b, ORIENTATION_BINS), preds.do)
    return np.atleast_1d(s_err), np.atleast_1d(o_err)


def _hits(err, threshold):
    return err <= threshold + THRESH_EPS


def accuracy(preds: PairPredictions, scale_thresholds=SCALE_THRESHOLDS,
             orientation_thresholds=ORIENTATION_THRESHOLDS) -> dict:
    """Fraction of pairs within each threshold, per axis."""
    if len(preds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    s_err, o_err = pair_errors(preds)
    return {
        "scale": {_key(t): float(_hits(s_err, t).mean()) for t in scale_thresholds},
        "orientation": {_key(t): float(_hits(o_err, t).mean()) for t in orientation_thresholds},
    }


def _topk_hits(h_a, h_b, delta, k, spec, threshold):
    ia = topk_indices(h_a, k)
    ib = topk_indices(h_b, k)
    va = bin_values(spec, ia)[:, :, None]
    vb = bin_values(spec, ib)[:, None, :]
    d = np.asarray(delta)[:, None, None]
    if spec.kind is Axis.SCALE:
        err = scale_error(va, vb, d)
    else:
        err = orientation_error(va, vb, d)
    return _hits(err, threshold).any(axis=(1, 2))


def topk_recall(preds: PairPredictions, k: int, scale_threshold: float = SCALE_THRESHOLDS[1],
                orientation_threshold: float = ORIENTATION_THRESHOLDS[1]) -> dict:
    """Fraction of pairs where some pairing of top-``k`` candidates is within threshold.

    ``k`` is one value for both axes or a ``(k_scale, k_orientation)`` pair.
    """
    if len(preds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    ks, ko = (k, k) if np.isscalar(k) else k
    s = _topk_hits(preds.scale_a, preds.scale_b, preds.ds, ks, SCALE_BINS, scale_threshold)
    o = _topk_hits(preds.ori_a, preds.ori_b, preds.do, ko, ORIENTATION_BINS, orientation_threshold)
    return {"scale": float(s.mean()), "orientation": float(o.mean())}


def _buckets(values, centers, circular=False):
    diff = np.abs(np.asarray(values)[:, None] - centers[None, :])
    if circular:
        diff = np.minimum(diff, TWO_PI - diff)
    return np.argmin(diff, axis=1)


def rangewise(preds: PairPredictions, scale_threshold: float = SCALE_THRESHOLDS[1],
              orientation_threshold: float = ORIENTATION_THRESHOLDS[1]) -> dict:
    """Accuracy per ground-truth grid value; buckets without pairs are ``None``.

    ``total`` is the pair-weighted mean over all buckets.
    """
    if len(preds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    s_err, o_err = pair_errors(preds)
    out = {}
    for name, err, thr, truth, spec, circ in (
            ("scale", s_err, scale_threshold, preds.ds, SCALE_BINS, False),
            ("orientation", o_err, orientation_threshold, preds.do, ORIENTATION_BINS, True)):
        bucket = _buckets(truth, spec.centers, circ)
        hits = _hits(err, thr)
        acc, counts = [], []
        for i in range(spec.count):
            sel = bucket == i
            counts.append(int(sel.sum()))
            acc.append(float(hits[sel].mean()) if sel.any() else None)
        out[name] = {"centers": spec.centers.tolist(), "accuracy": acc, "counts": counts,
                     "total": float(hits.mean())}
    return out


def _key(t: float) -> str:
    return f"{t:.6f}"


@dataclass
class EvalReport:
    pairs: int
    accuracy: dict
    topk: dict = field(default_factory=dict)
    rangewise: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def table(self) -> str:
        lines = [f"pairs: {self.pairs}"]
        for axis, accs in self.accuracy.items():
            cells = "  ".join(f"@{float(t):.4f}: {100 * v:6.2f}%" for t, v in accs.items())
            lines.append(f"{axis:<12}{cells}")
        if self.topk:
            lines.append("top-k recall   " + "  ".join(f"k={k}" .ljust(8) for k in self.topk))
            for axis in ("scale", "orientation"):
                lines.append(f"  {axis:<13}" + "  ".join(
                    f"{100 * r[axis]:6.2f}%".ljust(8) for r in self.topk.values()))
        for axis, tbl in self.rangewise.items():
            cells = " ".join("   -  " if a is None else f"{100 * a:5.1f}%" for a in tbl["accuracy"])
            lines.append(f"range {axis}: {cells} | total {100 * tbl['total']:.1f}%")
        return "\n".join(lines)


def build_report(preds: PairPredictions, ks=(1, 2, 3, 4)) -> EvalReport:
    topk = {str(k): topk_recall(preds, k) for k in ks}
    return EvalReport(len(preds), accuracy(preds), topk, rangewise(preds))


def evaluate(predictor, dataset, ks=(1, 2, 3, 4)) -> EvalReport:
    return build_report(predict_pairs(predictor, dataset), ks)


def plot_rangewise(report: EvalReport, path) -> None:
    """Static SVG bar chart of range-wise accuracy."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(12, 3.5))
    for ax, axis in zip(axes, ("scale", "orientation")):
        tbl = report.rangewise[axis]
        vals = [0.0 if a is None else 100 * a for a in tbl["accuracy"]] + [100 * tbl["total"]]
        labels = [f"{c:.2f}" for c in tbl["centers"]] + ["total"]
        ax.bar(range(len(vals)), vals, color=["C0"] * (len(vals) - 1) + ["C3"])
        ax.set_xticks(range(len(vals)))
        ax.set_xticklabels(labels, rotation=90, fontsize=6)
        ax.set_ylim(0, 100)
        ax.set_title(f"{axis} accuracy by ground truth")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
