"""Confusion-matrix metrics, dataset aggregation and threshold selection.

The positive class is always "structure". Metrics with a zero denominator
are flagged undefined (None) and excluded from dataset means; the excluded
count is reported.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import EmptyInputError, LengthMismatchError, SingleClassError


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class CloudMetrics:
    """Precision/recall/F1/IoU of the structure class; None marks an
    undefined (0/0) value. ``iou`` is the single positive-class overlap,
    reported elsewhere under the name mIoU; ``two_class_iou`` averages the
    structure and background overlaps for comparison."""

    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    iou: Optional[float]
    two_class_iou: Optional[float] = None


def confusion(pred, truth) -> ConfusionMatrix:
    """Tally a boolean prediction against boolean truth (positive=structure)."""
    p = np.asarray(pred, dtype=bool).reshape(-1)
    t = np.asarray(truth, dtype=bool).reshape(-1)
    if len(p) != len(t):
        raise LengthMismatchError(f"pred has {len(p)} points, truth {len(t)}")
    if len(p) == 0:
        raise EmptyInputError("cannot evaluate zero points")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = len(p) - tp - fp - fn
    return ConfusionMatrix(tp, fp, tn, fn)


def metrics(cm: ConfusionMatrix) -> CloudMetrics:
    """Precision, recall, F1 and IoU from a confusion matrix.

    F1 uses the equivalent 2TP / (2TP + FP + FN) form so that it is defined
    exactly when IoU is, preserving the identity iou = f1 / (2 - f1).
    """
    tp, fp, tn, fn = cm.tp, cm.fp, cm.tn, cm.fn
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else None
    iou = tp / (tp + fp + fn) if tp + fp + fn else None
    iou_bg = tn / (tn + fp + fn) if tn + fp + fn else None
    two = (iou + iou_bg) / 2 if iou is not None and iou_bg is not None else None
    return CloudMetrics(precision, recall, f1, iou, two)


@dataclass(frozen=True)
class ThresholdSearchPoint:
    threshold: float
    tpr: float
    fpr: float
    precision: float      # NaN when no point is predicted positive
    recall: float
    f1: float
    gmean: float


def _threshold_curve(scores, truth):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    t = np.asarray(truth, dtype=bool).reshape(-1)
    if len(s) != len(t):
        raise LengthMismatchError(f"{len(s)} scores vs {len(t)} labels")
    if len(s) == 0:
        raise EmptyInputError("no scores given")
    n_pos = int(t.sum())
    n_neg = len(t) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("threshold search needs both classes in truth")

    uniq = np.unique(s)
    cands = np.concatenate([[uniq[0] - 1.0],
                            (uniq[:-1] + uniq[1:]) / 2.0,
                            [uniq[-1] + 1.0]])
    order = np.argsort(s, kind="stable")
    sorted_scores = s[order]
    pos_prefix = np.concatenate([[0], np.cumsum(t[order])])
    # prediction rule: positive iff score >= threshold
    below = np.searchsorted(sorted_scores, cands, side="left")
    tp = n_pos - pos_prefix[below]
    pred_pos = len(s) - below
    fp = pred_pos - tp
    fn = n_pos - tp

    tpr = tp / n_pos
    fpr = fp / n_neg
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(pred_pos > 0, tp / np.maximum(pred_pos, 1), np.nan)
    f1 = 2 * tp / (2 * tp + fp + fn)
    gmean = np.sqrt(tpr * (1.0 - fpr))
    curve = [ThresholdSearchPoint(float(c), float(a), float(b), float(p),
                                  float(a), float(f), float(g))
             for c, a, b, p, f, g in zip(cands, tpr, fpr, precision, f1, gmean)]
    return cands, gmean, f1, curve


def select_threshold_roc(scores, truth):
    """Threshold maximising gmean = sqrt(TPR * (1 - FPR)) over candidate
    thresholds (midpoints of consecutive unique scores plus sentinels).
    Ties resolve to the smallest threshold."""
    cands, gmean, _, curve = _threshold_curve(scores, truth)
    return float(cands[int(np.argmax(gmean))]), curve


def select_threshold_pr(scores, truth):
    """Threshold maximising the F1-score; candidates and ties as in
    select_threshold_roc."""
    cands, _, f1, curve = _threshold_curve(scores, truth)
    return float(cands[int(np.argmax(f1))]), curve


@dataclass
class CloudRecord:
    file: str
    cm: Optional[ConfusionMatrix] = None
    metrics: Optional[CloudMetrics] = None
    latency_ms: Optional[float] = None
    error: Optional[str] = None


@dataclass
class DatasetReport:
    """Per-cloud metrics plus unweighted means over defined clouds."""

    rows: list
    mean_f1: Optional[float]
    mean_iou: Optional[float]
    mean_two_class_iou: Optional[float]
    undefined_excluded: int
    latency_mean_ms: Optional[float]
    latency_median_ms: Optional[float]
    latency_p95_ms: Optional[float]
    config_fingerprint: str
    errors: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "config_fingerprint": self.config_fingerprint,
            "mean_f1": self.mean_f1,
            "mean_iou": self.mean_iou,
            "mean_two_class_iou": self.mean_two_class_iou,
            "undefined_excluded": self.undefined_excluded,
            "latency_mean_ms": self.latency_mean_ms,
            "latency_median_ms": self.latency_median_ms,
            "latency_p95_ms": self.latency_p95_ms,
            "errors": self.errors,
            "clouds": [
                {
                    "file": r.file,
                    "tp": r.cm.tp if r.cm else None,
                    "fp": r.cm.fp if r.cm else None,
                    "tn": r.cm.tn if r.cm else None,
                    "fn": r.cm.fn if r.cm else None,
                    "precision": r.metrics.precision if r.metrics else None,
                    "recall": r.metrics.recall if r.metrics else None,
                    "f1": r.metrics.f1 if r.metrics else None,
                    "iou": r.metrics.iou if r.metrics else None,
                    "two_class_iou": r.metrics.two_class_iou if r.metrics else None,
                    "latency_ms": r.latency_ms,
                    "error": r.error,
                }
                for r in self.rows
            ],
        }

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")

    def write_csv(self, path):
        cols = ["file", "TP", "FP", "TN", "FN", "precision", "recall", "f1",
                "iou", "latency_ms"]
        ok = [r for r in self.rows if r.cm is not None]

        def cell(v):
            return "" if v is None else f"{v:.6f}" if isinstance(v, float) else v

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in ok:
                w.writerow([r.file, r.cm.tp, r.cm.fp, r.cm.tn, r.cm.fn,
                            cell(r.metrics.precision), cell(r.metrics.recall),
                            cell(r.metrics.f1), cell(r.metrics.iou),
                            cell(r.latency_ms)])
            if ok:
                mean = ["mean",
                        cell(float(np.mean([r.cm.tp for r in ok]))),
                        cell(float(np.mean([r.cm.fp for r in ok]))),
                        cell(float(np.mean([r.cm.tn for r in ok]))),
                        cell(float(np.mean([r.cm.fn for r in ok]))),
                        "", "",
                        cell(self.mean_f1), cell(self.mean_iou),
                        cell(self.latency_mean_ms)]
                w.writerow(mean)


def _mean_defined(values):
    vals = [v for v in values if v is not None]
    return (float(np.mean(vals)) if vals else None), len(values) - len(vals)


def evaluate_pairs(records: list[CloudRecord], fingerprint: str) -> DatasetReport:
    """Aggregate per-cloud records into a DatasetReport (sorted by file so
    means are permutation invariant)."""
    rows = sorted(records, key=lambda r: r.file)
    mets = [r.metrics for r in rows if r.metrics is not None]
    mean_f1, und_f1 = _mean_defined([m.f1 for m in mets])
    mean_iou, und_iou = _mean_defined([m.iou for m in mets])
    mean_two, _ = _mean_defined([m.two_class_iou for m in mets])
    lats = [r.latency_ms for r in rows if r.latency_ms is not None]
    return DatasetReport(
        rows=rows,
        mean_f1=mean_f1,
        mean_iou=mean_iou,
        mean_two_class_iou=mean_two,
        undefined_excluded=max(und_f1, und_iou),
        latency_mean_ms=float(np.mean(lats)) if lats else None,
        latency_median_ms=float(np.median(lats)) if lats else None,
        latency_p95_ms=float(np.percentile(lats, 95)) if lats else None,
        config_fingerprint=fingerprint,
        errors=[f"{r.file}: {r.error}" for r in rows if r.error],
    )


def evaluate_dataset(truth_files: list, pred_dir=None, pipeline_cfg=None,
                     pred_field: str = "pred") -> DatasetReport:
    """Score predictions against labeled truth clouds.

    Exactly one of ``pred_dir`` (directory of prediction PCDs carrying a
    ``pred`` field, matched by file name) or ``pipeline_cfg`` (run the
    segmentation on each truth cloud) must be given. Per-file problems are
    collected in the report instead of aborting the whole run.
    """
    from . import io as tio
    from .segment import run_pipeline

    if (pred_dir is None) == (pipeline_cfg is None):
        raise ValueError("pass exactly one of pred_dir or pipeline_cfg")
    fingerprint = "external-predictions" if pred_dir is not None else \
        tio.config_fingerprint(pipeline_cfg)

    records = []
    for path in sorted(Path(p) for p in truth_files):
        rec = CloudRecord(file=path.name)
        try:
            cloud = tio.read_pcd(path)
            truth = cloud.truss_mask
            if pred_dir is not None:
                ppath = Path(pred_dir) / path.name
                if not ppath.exists():
                    raise FileNotFoundError(f"no prediction for {path.name}")
                _, fields = tio.read_pcd_arrays(ppath)
                if pred_field not in fields:
                    raise LengthMismatchError(
                        f"{ppath.name} lacks field {pred_field!r}")
                pred = np.asarray(fields[pred_field]).reshape(-1) > 0.5
                lat_path = ppath.with_suffix(".latency.json")
                if lat_path.exists():
                    rec.latency_ms = json.loads(lat_path.read_text()).get("total_ms")
            else:
                out = run_pipeline(cloud, pipeline_cfg)
                pred = out.prediction
                rec.latency_ms = out.total_ms
            rec.cm = confusion(pred, truth)
            rec.metrics = metrics(rec.cm)
        except Exception as exc:           # collected per file, not fatal
            rec.error = f"{type(exc).__name__}: {exc}"
        records.append(rec)
    return evaluate_pairs(records, fingerprint)


def time_pipeline(truth_files: list, cfg, repeats: int = 1) -> dict:
    """Wall-clock latency of run_pipeline over each cloud, repeated.

    Returns mean/median/p95 in milliseconds plus the raw samples. Runs
    single threaded in call order.
    """
    from . import io as tio
    from .segment import run_pipeline

    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    samples = []
    for path in sorted(Path(p) for p in truth_files):
        cloud = tio.read_pcd(path)
        for _ in range(repeats):
            t0 = time.perf_counter()
            run_pipeline(cloud, cfg)
            samples.append((time.perf_counter() - t0) * 1e3)
    return {
        "samples_ms": samples,
        "mean_ms": float(np.mean(samples)),
        "median_ms": float(np.median(samples)),
        "p95_ms": float(np.percentile(samples, 95)),
    }
