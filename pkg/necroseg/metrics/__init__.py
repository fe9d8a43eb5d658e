"""Segmentation scores and necrosis-rate estimates"""
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import pandas as pd

from necroseg.core import CLASS_NAMES, ClassId, N_CLASSES
from necroseg.exceptions import (
    ConfigError,
    EmptyConfusionError,
    ShapeMismatchError,
    UndefinedRateError,
)
from necroseg.tiling import class_counts

ABSENT_CLASS_POLICIES = ("present", "all")
NECROTIC = (ClassId.NC, ClassId.FH, ClassId.HC, ClassId.IF)
TUMOR_BED = (ClassId.VT,) + NECROTIC
REPORT_CLASSES = (ClassId.VT, ClassId.NC, ClassId.FH, ClassId.HC, ClassId.IF, ClassId.NT)


@dataclass
class ConfusionMatrix:
    """C×C pixel counts, rows ground truth and columns prediction"""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64))

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.counts, index=list(CLASS_NAMES), columns=list(CLASS_NAMES))


@dataclass
class SegmentationScores:
    miou: float
    precision: float
    recall: float
    per_class: pd.DataFrame

    def to_dict(self) -> dict:
        table = self.per_class.astype(object).where(self.per_class.notna(), None)
        return {
            "miou": self.miou,
            "precision": self.precision,
            "recall": self.recall,
            "per_class": table.to_dict(orient="index"),
        }


@dataclass
class NecrosisReport:
    p: np.ndarray
    r_dl: float
    r_pr: float
    abs_diff: float
    class_diffs: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "p": [int(v) for v in self.p],
            "r_dl": self.r_dl,
            "r_pr": self.r_pr,
            "abs_diff": self.abs_diff,
            "class_diffs": dict(self.class_diffs),
        }

    def to_row(self) -> dict:
        """Flat row for CSV summaries"""
        return {"r_pr": self.r_pr, "r_dl": self.r_dl, "abs_diff": self.abs_diff, **self.class_diffs}


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> None:
    if np.shape(pred) != np.shape(gt):
        raise ShapeMismatchError(f"Prediction {np.shape(pred)} and ground truth {np.shape(gt)} differ in shape")


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    """Confusion matrix of two class-index rasters"""
    _check_pair(pred, gt)
    pred = np.asarray(pred).ravel().astype(np.int64)
    gt = np.asarray(gt).ravel().astype(np.int64)
    for name, values in (("prediction", pred), ("ground truth", gt)):
        if values.size and (values.min() < 0 or values.max() >= N_CLASSES):
            raise ShapeMismatchError(f"{name} holds values outside 0..{N_CLASSES - 1}")
    counts = np.bincount(gt * N_CLASSES + pred, minlength=N_CLASSES * N_CLASSES)
    return ConfusionMatrix(counts.reshape(N_CLASSES, N_CLASSES))


def _ratio(num: np.ndarray, den: np.ndarray, fill: float) -> np.ndarray:
    out = np.full(num.shape, fill, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def segmentation_metrics(cm: ConfusionMatrix, policy: str = "present") -> SegmentationScores:
    """Macro IoU, precision and recall

    Args:
        cm (ConfusionMatrix): accumulated counts
        policy (str): ``present`` averages over classes with a nonzero
            denominator; ``all`` averages over every class, scoring 0 where
            the denominator vanishes
    Returns:
        SegmentationScores: macro means and the per-class table (NaN where undefined)
    """
    if policy not in ABSENT_CLASS_POLICIES:
        raise ConfigError(f"policy must be one of {ABSENT_CLASS_POLICIES}, got {policy}")
    counts = cm.counts.astype(np.float64)
    if counts.sum() == 0:
        raise EmptyConfusionError("Cannot score an empty confusion matrix")
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denominators = {"iou": tp + fp + fn, "precision": tp + fp, "recall": tp + fn}
    per_class = pd.DataFrame(
        {name: _ratio(tp, den, np.nan) for name, den in denominators.items()},
        index=list(CLASS_NAMES),
    )
    means = {}
    for name, den in denominators.items():
        values = per_class[name].to_numpy()
        if policy == "present":
            means[name] = float(values[den > 0].mean())
        else:
            means[name] = float(np.nan_to_num(values, nan=0.0).mean())
    return SegmentationScores(
        miou=means["iou"],
        precision=means["precision"],
        recall=means["recall"],
        per_class=per_class,
    )


def _rate_from_counts(p: np.ndarray) -> float:
    den = int(sum(p[c] for c in TUMOR_BED))
    if den == 0:
        raise UndefinedRateError("No tumor-bed pixels (VT, NC, FH, HC, IF); the necrosis rate is undefined")
    return float(sum(p[c] for c in NECROTIC)) / den


def necrosis_rate(labels: np.ndarray) -> float:
    """(NC + FH + HC + IF) / (VT + NC + FH + HC + IF) over a class-index raster"""
    return _rate_from_counts(class_counts(labels))


def class_fractions(p: np.ndarray) -> Dict[str, float]:
    """Pixel share of each reported class among non-background pixels"""
    tissue = float(p.sum() - p[ClassId.BG])
    return {c.name: (float(p[c]) / tissue if tissue > 0 else 0.0) for c in REPORT_CLASSES}


def tnr_report(pred: np.ndarray, gt: np.ndarray) -> NecrosisReport:
    """Necrosis rate of the prediction against the rate of the ground truth

    Per-class differences are absolute differences of class shares among
    non-background pixels.
    """
    _check_pair(pred, gt)
    p_gt = class_counts(gt)
    r_pr = _rate_from_counts(p_gt)
    p = class_counts(pred)
    try:
        r_dl = _rate_from_counts(p)
    except UndefinedRateError:
        # a prediction without tumor bed estimates no necrosis
        r_dl = 0.0
    f_pred, f_gt = class_fractions(p), class_fractions(p_gt)
    return NecrosisReport(
        p=p,
        r_dl=r_dl,
        r_pr=r_pr,
        abs_diff=abs(r_pr - r_dl),
        class_diffs={name: abs(f_pred[name] - f_gt[name]) for name in f_gt},
    )


def scores_table(scores: Dict[str, SegmentationScores], tnr_diffs: Optional[Dict[str, Optional[float]]] = None) -> pd.DataFrame:
    """One row per method: mIOU, precision, recall and optionally the mean TNR difference"""
    rows = []
    for method, s in scores.items():
        row = {"method": method, "mIOU": s.miou, "Precision": s.precision, "Recall": s.recall}
        if tnr_diffs is not None:
            row["TNR diff"] = tnr_diffs.get(method)
        rows.append(row)
    return pd.DataFrame(rows).set_index("method")
