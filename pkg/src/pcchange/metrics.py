"""Confusion accounting, macro metrics, and the cloud-to-cloud baseline.

Class 1 (changed) is the positive class. The m-prefixed metrics are
unweighted two-class macro averages: each per-class ratio is computed for
changed and unchanged separately and the two are averaged. A ratio whose
denominator is zero (a class absent from both prediction and truth, or an
empty prediction side) contributes 0 to the average and is listed in the
report's `degenerate` field rather than silently skipped.

Evaluation happens on T2 points, where predictions live.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import LabeledPointCloud, SpatialIndex
from .errors import DataError

# four-way per-point outcome codes for the color export
CODE_TN = 0
CODE_TP = 1
CODE_FP = 2
CODE_FN = 3
CODE_NAMES = {CODE_TN: "TN", CODE_TP: "TP", CODE_FP: "FP", CODE_FN: "FN"}


@dataclass
class ConfusionMatrix:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(
            tp=self.tp + other.tp, tn=self.tn + other.tn,
            fp=self.fp + other.fp, fn=self.fn + other.fn,
        )


@dataclass
class MetricReport:
    """All values in percent."""

    oa: float
    mrecall: float
    mprecision: float
    mf1: float
    miou: float
    degenerate: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "OA": self.oa,
            "mrecall": self.mrecall,
            "mprecision": self.mprecision,
            "mf1score": self.mf1,
            "mIoU": self.miou,
        }


def confusion(pred: np.ndarray, truth: np.ndarray) -> ConfusionMatrix:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise DataError(f"confusion: shape mismatch {pred.shape} vs {truth.shape}")
    for name, arr in (("pred", pred), ("truth", truth)):
        if not np.all((arr == 0) | (arr == 1)):
            raise DataError(f"confusion: {name} labels must be 0 or 1")
    p = pred == 1
    t = truth == 1
    return ConfusionMatrix(
        tp=int(np.sum(p & t)),
        tn=int(np.sum(~p & ~t)),
        fp=int(np.sum(p & ~t)),
        fn=int(np.sum(~p & t)),
    )


def _ratio(num: int, den: int, name: str, degenerate: list) -> float:
    if den == 0:
        degenerate.append(name)
        return 0.0
    return num / den


def metrics(c: ConfusionMatrix) -> MetricReport:
    if c.total == 0:
        raise DataError("metrics: empty confusion matrix")
    deg: list = []
    oa = (c.tp + c.tn) / c.total
    rec_c = _ratio(c.tp, c.tp + c.fn, "recall/changed", deg)
    rec_u = _ratio(c.tn, c.tn + c.fp, "recall/unchanged", deg)
    pre_c = _ratio(c.tp, c.tp + c.fp, "precision/changed", deg)
    pre_u = _ratio(c.tn, c.tn + c.fn, "precision/unchanged", deg)
    f1_c = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, "f1/changed", deg)
    f1_u = _ratio(2 * c.tn, 2 * c.tn + c.fp + c.fn, "f1/unchanged", deg)
    iou_c = _ratio(c.tp, c.tp + c.fp + c.fn, "iou/changed", deg)
    iou_u = _ratio(c.tn, c.tn + c.fp + c.fn, "iou/unchanged", deg)
    return MetricReport(
        oa=100.0 * oa,
        mrecall=100.0 * (rec_c + rec_u) / 2.0,
        mprecision=100.0 * (pre_c + pre_u) / 2.0,
        mf1=100.0 * (f1_c + f1_u) / 2.0,
        miou=100.0 * (iou_c + iou_u) / 2.0,
        degenerate=deg,
    )


def evaluate_labels(pred: np.ndarray, truth: np.ndarray) -> MetricReport:
    return metrics(confusion(pred, truth))


# ---------------------------------------------------------------------------
# cloud-to-cloud baseline
# ---------------------------------------------------------------------------

def c2c_distances(cloud_t1: LabeledPointCloud, cloud_t2: LabeledPointCloud) -> np.ndarray:
    """Nearest-neighbor distance from every T2 point into T1."""
    if len(cloud_t1) == 0 or len(cloud_t2) == 0:
        raise DataError("c2c: empty cloud")
    index = SpatialIndex(cloud_t1)
    _, d2 = index.query_batch(cloud_t2.points, 1)
    return np.sqrt(d2[:, 0])


def c2c_baseline(
    cloud_t1: LabeledPointCloud,
    cloud_t2: LabeledPointCloud,
    threshold: float,
    distances: np.ndarray | None = None,
) -> np.ndarray:
    """Label a T2 point changed iff its NN distance into T1 exceeds the
    threshold. Monotone in the threshold by construction."""
    if threshold <= 0:
        raise DataError(f"c2c threshold must be > 0, got {threshold}")
    if distances is None:
        distances = c2c_distances(cloud_t1, cloud_t2)
    return (distances > threshold).astype(np.int64)


def best_c2c_threshold(pairs: list, thresholds: np.ndarray) -> tuple[float, float]:
    """Sweep thresholds over (t1, t2-labeled) pairs; return the threshold
    with the best pooled mIoU and that mIoU. Distances are computed once
    per pair."""
    dists = [c2c_distances(t1, t2) for t1, t2 in pairs]
    best = (0.0, -1.0)
    for th in thresholds:
        pooled = ConfusionMatrix()
        for (t1, t2), d in zip(pairs, dists):
            pred = (d > th).astype(np.int64)
            pooled = pooled + confusion(pred, t2.labels)
        miou = metrics(pooled).miou
        if miou > best[1]:
            best = (float(th), miou)
    return best


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

def format_table(report: MetricReport, title: str = "") -> str:
    """Aligned text table in the published column order."""
    cols = ["OA", "mrecall", "mprecision", "mf1score", "mIoU"]
    vals = report.as_dict()
    head = "  ".join(f"{c:>10}" for c in cols)
    row = "  ".join(f"{vals[c]:>10.2f}" for c in cols)
    lines = []
    if title:
        lines.append(title)
    lines += [head, row]
    if report.degenerate:
        lines.append("undefined (counted as 0): " + ", ".join(report.degenerate))
    return "\n".join(lines)


def format_keyvalue(report: MetricReport) -> str:
    lines = [f"{k} = {v:.4f}" for k, v in report.as_dict().items()]
    lines.append("degenerate = " + (",".join(report.degenerate) or "none"))
    return "\n".join(lines) + "\n"


def outcome_codes(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-point 4-way outcome for visualization: 0 TN, 1 TP, 2 FP, 3 FN."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    codes = np.full(pred.shape, CODE_TN, dtype=np.int64)
    codes[(pred == 1) & (truth == 1)] = CODE_TP
    codes[(pred == 1) & (truth == 0)] = CODE_FP
    codes[(pred == 0) & (truth == 1)] = CODE_FN
    return codes


def save_colored(path, points: np.ndarray, pred: np.ndarray, truth: np.ndarray) -> None:
    """xyz + predicted label + 4-way outcome code, one line per point."""
    codes = outcome_codes(pred, truth)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for (x, y, z), pl, cd in zip(points, pred, codes):
            fh.write(f"{x:.6f} {y:.6f} {z:.6f} {int(pl)} {int(cd)}\n")
