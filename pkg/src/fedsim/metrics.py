"""Segmentation metrics on the nested ET / TC / WT composite masks."""

from __future__ import annotations

import math
import statistics
from dataclasses import asdict, dataclass, fields
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.ndimage import distance_transform_edt

from fedsim.errors import DataError, UsageError

REGIONS = ("et", "tc", "wt")
METRIC_KINDS = ("dice", "sens", "spec", "hd95")
METRIC_COLUMNS = tuple(f"{k}_{r}" for k in METRIC_KINDS for r in REGIONS)


class MaskTriple(NamedTuple):
    et: np.ndarray
    tc: np.ndarray
    wt: np.ndarray


def composite_masks(labels: np.ndarray) -> MaskTriple:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 3):
        raise DataError("labels must lie in {0, 1, 2, 3}")
    return MaskTriple(et=labels == 3, tc=(labels == 2) | (labels == 3), wt=labels > 0)


def _confusion(pred, truth):
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise UsageError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    tn = pred.size - tp - fp - fn
    return tp, fp, fn, tn


# Empty denominators count as perfect agreement on absence.
def dice(pred, truth) -> float:
    tp, fp, fn, _ = _confusion(pred, truth)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def sensitivity(pred, truth) -> float:
    tp, _, fn, _ = _confusion(pred, truth)
    return 1.0 if tp + fn == 0 else tp / (tp + fn)


def specificity(pred, truth) -> float:
    _, fp, _, tn = _confusion(pred, truth)
    return 1.0 if tn + fp == 0 else tn / (tn + fp)


def _nearest_rank(values: np.ndarray, q: float) -> float:
    ordered = np.sort(values)
    rank = max(1, math.ceil(q / 100.0 * ordered.size))
    return float(ordered[rank - 1])


def hausdorff95(pred, truth) -> float:
    """Symmetric 95th-percentile Hausdorff distance over full pixel sets.

    For each direction the 95th percentile (nearest rank) of the per-pixel
    nearest-neighbour distance is taken; the result is the larger of the two.
    Both empty gives 0; exactly one empty gives the grid diagonal.
    """
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise UsageError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    has_pred, has_truth = pred.any(), truth.any()
    if not has_pred and not has_truth:
        return 0.0
    if not has_pred or not has_truth:
        return float(math.hypot(*pred.shape))
    # EDT of the complement gives each pixel's distance to the nearest set pixel.
    to_truth = distance_transform_edt(~truth)
    to_pred = distance_transform_edt(~pred)
    return max(_nearest_rank(to_truth[pred], 95), _nearest_rank(to_pred[truth], 95))


@dataclass(frozen=True)
class MetricRecord:
    dice_et: float
    dice_tc: float
    dice_wt: float
    sens_et: float
    sens_tc: float
    sens_wt: float
    spec_et: float
    spec_tc: float
    spec_wt: float
    hd95_et: float
    hd95_tc: float
    hd95_wt: float
    mean_dice: float

    def as_dict(self) -> dict:
        return asdict(self)


def mean_dice(record: MetricRecord) -> float:
    return (record.dice_et + record.dice_tc + record.dice_wt) / 3.0


def evaluate_labels(pred_labels: np.ndarray, true_labels: np.ndarray) -> MetricRecord:
    pred = composite_masks(pred_labels)
    truth = composite_masks(true_labels)
    vals = {}
    for region in REGIONS:
        p, t = getattr(pred, region), getattr(truth, region)
        vals[f"dice_{region}"] = dice(p, t)
        vals[f"sens_{region}"] = sensitivity(p, t)
        vals[f"spec_{region}"] = specificity(p, t)
        vals[f"hd95_{region}"] = hausdorff95(p, t)
    vals["mean_dice"] = (vals["dice_et"] + vals["dice_tc"] + vals["dice_wt"]) / 3.0
    return MetricRecord(**vals)


def average_records(records: Sequence[MetricRecord], weights: Sequence[float] | None = None) -> MetricRecord:
    """Weighted mean of each field; ``mean_dice`` is recomputed from the averaged Dice values."""
    if not records:
        raise UsageError("no records to average")
    w = np.ones(len(records)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    vals = {}
    for name in METRIC_COLUMNS:
        acc = 0.0
        for wi, rec in zip(w, records):
            acc += wi * getattr(rec, name)
        vals[name] = float(acc)
    vals["mean_dice"] = (vals["dice_et"] + vals["dice_tc"] + vals["dice_wt"]) / 3.0
    return MetricRecord(**vals)


class Summary(NamedTuple):
    mean: float
    std: float
    q1: float
    q2: float
    q3: float


def summary_stats(values: Iterable[float]) -> Summary:
    """Mean, population std and quartiles.

    Quartiles interpolate linearly between order statistics at position
    ``q * (n - 1)`` (the "inclusive" convention), so for 1..5 they are 2, 3, 4.
    """
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise UsageError("summary_stats needs at least one value")
    q1, q2, q3 = np.percentile(arr, [25, 50, 75], method="linear")
    # statistics.pstdev is exactly 0 for constant input, unlike np.std
    values = arr.tolist()
    return Summary(statistics.fmean(values), statistics.pstdev(values), float(q1), float(q2), float(q3))


RECORD_FIELDS = tuple(f.name for f in fields(MetricRecord))
