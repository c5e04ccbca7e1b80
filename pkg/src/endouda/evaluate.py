"""Segmentation metrics, per-method reports, and paired statistical comparison."""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import stats

from .data import MaskTensor

METRIC_NAMES = ("iou", "dice", "precision", "recall")


@dataclass(frozen=True)
class BinaryMetrics:
    iou: float
    dice: float
    precision: float
    recall: float

    def as_tuple(self):
        return (self.iou, self.dice, self.precision, self.recall)


def _to_2d(x, what):
    if isinstance(x, MaskTensor):
        x = x.data
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    x = np.asarray(x)
    x = np.squeeze(x)
    if x.ndim != 2:
        raise ValueError(f"{what} must be a single 2-D mask, got shape {x.shape}")
    return x


def _ratio(num, den):
    return num / den if den > 0 else 0.0


def binary_metrics(p, g, threshold=0.5):
    """IoU, Dice, precision, recall of one predicted mask against ground truth.

    p is binarized at `threshold` (>=). Empty prediction and empty ground
    truth score 1.0 on all four metrics; an empty denominator with a nonempty
    counterpart scores 0.
    """
    pa, ga = _to_2d(p, "prediction"), _to_2d(g, "ground truth")
    if pa.shape != ga.shape:
        raise ValueError(f"shape mismatch: prediction {pa.shape} vs ground truth {ga.shape}")
    pred = pa >= threshold
    gt = ga >= 0.5
    tp = int(np.sum(pred & gt))
    fp = int(np.sum(pred & ~gt))
    fn = int(np.sum(~pred & gt))
    if tp + fp + fn == 0:
        return BinaryMetrics(1.0, 1.0, 1.0, 1.0)
    return BinaryMetrics(
        iou=_ratio(tp, tp + fp + fn),
        dice=_ratio(2 * tp, 2 * tp + fp + fn),
        precision=_ratio(tp, tp + fp),
        recall=_ratio(tp, tp + fn),
    )


@dataclass(frozen=True)
class PairedTTest:
    t: float
    p: float
    n: int
    degenerate: bool = False


def paired_t_test(a, b):
    """Two-sided paired t-test on per-image metric lists.

    Zero-variance differences are reported with the convention t = +/-inf,
    p = 0 (or t = 0, p = 1 when the samples are identical) and flagged as
    degenerate.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("paired_t_test needs two equal-length 1-D samples, n >= 2")
    diff = a - b
    sd = diff.std(ddof=1)
    if sd == 0.0:
        mean = diff.mean()
        if mean == 0.0:
            return PairedTTest(0.0, 1.0, len(a), degenerate=True)
        return PairedTTest(math.copysign(math.inf, mean), 0.0, len(a), degenerate=True)
    t, p = stats.ttest_rel(a, b)
    return PairedTTest(float(t), float(p), len(a))


@dataclass
class EvalReport:
    """Per-image segmentation metrics plus mean/std aggregates for one method."""

    method: str
    dataset_name: str
    image_ids: list = field(default_factory=list)
    records: list = field(default_factory=list)  # BinaryMetrics per image

    def add(self, image_id, metrics):
        self.image_ids.append(image_id)
        self.records.append(metrics)

    def values(self, metric):
        return np.array([getattr(r, metric) for r in self.records], dtype=float)

    def aggregate(self):
        """{metric: (mean, sample std)}; recomputable from the per-image rows."""
        out = {}
        for m in METRIC_NAMES:
            vals = self.values(m)
            std = vals.std(ddof=1) if len(vals) > 1 else 0.0
            out[m] = (float(vals.mean()), float(std))
        return out

    def write_csvs(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        per_image = out / "per_image.csv"
        with open(per_image, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["id", *METRIC_NAMES])
            for image_id, rec in zip(self.image_ids, self.records):
                w.writerow([image_id] + [f"{v:.17g}" for v in rec.as_tuple()])
        aggregate = out / "aggregate.csv"
        agg = self.aggregate()
        with open(aggregate, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["metric", "mean", "std", "n", "method", "dataset"])
            for m in METRIC_NAMES:
                mean, std = agg[m]
                w.writerow(
                    [m, f"{mean:.17g}", f"{std:.17g}", len(self.records), self.method, self.dataset_name]
                )
        return per_image, aggregate

    @classmethod
    def from_per_image_csv(cls, path, method="", dataset_name=""):
        report = cls(method=method, dataset_name=dataset_name)
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                report.add(
                    row["id"],
                    BinaryMetrics(*(float(row[m]) for m in METRIC_NAMES)),
                )
        return report


def evaluate_method(dataset, predictor, method="method", dataset_name="", threshold=0.5):
    """Run a predictor (unit-range images -> probability masks) over a dataset.

    Per-image metrics follow dataset order; the Dice/IoU algebraic identity
    dice == 2*iou/(1+iou) is checked on every image.
    """
    images = dataset.images()
    probs = predictor(images)
    if isinstance(probs, MaskTensor):
        probs = probs.data
    report = EvalReport(method=method, dataset_name=dataset_name)
    for i, item in enumerate(dataset):
        rec = binary_metrics(probs[i], item.mask, threshold)
        expected_dice = 2.0 * rec.iou / (1.0 + rec.iou)
        if not math.isclose(rec.dice, expected_dice, rel_tol=1e-12, abs_tol=1e-12):
            raise AssertionError(
                f"dice/IoU identity violated for {item.name}: {rec.dice} vs {expected_dice}"
            )
        report.add(item.name, rec)
    return report


@dataclass(frozen=True)
class ComparisonResult:
    method_a: str
    method_b: str
    tests: dict  # metric name -> PairedTTest

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["metric", "method_a", "method_b", "t", "p", "n"])
            for m, res in self.tests.items():
                w.writerow([m, self.method_a, self.method_b, f"{res.t:.17g}", f"{res.p:.17g}", res.n])
        return path


def compare_methods(report_a, report_b):
    """Paired t-tests per metric between two reports over the same images."""
    if report_a.image_ids != report_b.image_ids:
        raise ValueError("reports must cover the same images in the same order")
    tests = {m: paired_t_test(report_a.values(m), report_b.values(m)) for m in METRIC_NAMES}
    return ComparisonResult(report_a.method, report_b.method, tests)
