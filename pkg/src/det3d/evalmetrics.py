"""AP and heading-weighted APH for 3D detections.

Heading accuracy of a matched prediction is ``1 - |wrap(yaw_pred - yaw_gt)| / pi``.
For APH the precision at each rank uses heading-weighted true positives while
recall counts matches, so a perfectly localised box with a reversed heading
still advances recall but adds nothing to precision.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .geom import get_iou_function, wrap_angle
from .structures import Detection, GroundTruthObject

DEFAULT_IOU_THRESHOLDS = {0: 0.7}
DEFAULT_IOU_THRESHOLD = 0.5


def heading_accuracy(yaw_pred: float, yaw_gt: float) -> float:
    return 1.0 - abs(wrap_angle(yaw_pred - yaw_gt)) / math.pi


@dataclass
class MatchResult:
    """Per-prediction match info for one frame, in input order."""

    gt_index: np.ndarray
    iou: np.ndarray
    heading: np.ndarray
    scores: np.ndarray
    class_ids: np.ndarray

    @property
    def matched(self) -> np.ndarray:
        return self.gt_index >= 0


def _threshold(thresholds: Mapping[int, float], class_id: int, default: float) -> float:
    return thresholds.get(class_id, default)


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthObject],
    iou_thresholds: Optional[Mapping[int, float]] = None,
    default_threshold: float = DEFAULT_IOU_THRESHOLD,
    iou_type: str = "3d",
) -> MatchResult:
    """Greedy per-class matching of one frame's predictions to its ground truths.

    Predictions go in descending score order; each takes the unmatched
    same-class ground truth with the highest IoU, provided it reaches the
    class threshold. IoU ties go to the lower ground-truth index.
    """
    thresholds = DEFAULT_IOU_THRESHOLDS if iou_thresholds is None else iou_thresholds
    iou_fn = get_iou_function(iou_type)
    n = len(dets)
    gt_index = np.full(n, -1, dtype=np.int64)
    ious = np.zeros(n)
    heading = np.zeros(n)
    taken = [False] * len(gts)
    for j in sorted(range(n), key=lambda j: -dets[j].score):
        det = dets[j]
        thr = _threshold(thresholds, det.class_id, default_threshold)
        best, best_iou = -1, -1.0
        for i, gt in enumerate(gts):
            if taken[i] or gt.class_id != det.class_id:
                continue
            value = iou_fn(det.box, gt.box)
            if value >= thr and value > best_iou:
                best, best_iou = i, value
        if best >= 0:
            taken[best] = True
            gt_index[j] = best
            ious[j] = best_iou
            heading[j] = heading_accuracy(det.box.yaw, gts[best].box.yaw)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    class_ids = np.array([d.class_id for d in dets], dtype=np.int64)
    return MatchResult(gt_index, ious, heading, scores, class_ids)


def pr_curve(scores, tp, heading, num_gt: int, heading_weighted: bool = False):
    """Precision and recall at every rank of the score-sorted predictions."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    tp = np.asarray(tp, dtype=np.float64)[order]
    credit = tp * np.asarray(heading, dtype=np.float64)[order] if heading_weighted else tp
    ranks = np.arange(1, len(tp) + 1)
    precision = np.cumsum(credit) / ranks
    recall = np.cumsum(tp) / num_gt
    return precision, recall


def average_precision(scores, tp, heading, num_gt: int, heading_weighted: bool = False) -> Optional[float]:
    """Exact area under the max-interpolated precision-recall curve.

    Returns ``None`` when ``num_gt`` is zero (recall undefined).
    """
    if num_gt <= 0:
        return None
    if len(scores) == 0:
        return 0.0
    precision, recall = pr_curve(scores, tp, heading, num_gt, heading_weighted)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.r_[0.0, recall])
    return float(math.fsum((steps * envelope).tolist()))


@dataclass
class ClassMetrics:
    ap: Optional[float]
    aph: Optional[float]
    num_gt: int
    num_dets: int


@dataclass
class EvalResult:
    per_class: dict = field(default_factory=dict)
    mAP: float = 0.0
    mAPH: float = 0.0
    curves: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_class": {
                str(c): {"AP": m.ap, "APH": m.aph, "num_gt": m.num_gt, "num_dets": m.num_dets}
                for c, m in sorted(self.per_class.items())
            },
            "mAP": self.mAP,
            "mAPH": self.mAPH,
        }

    def write_pr_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class_id", "rank", "score", "precision", "precision_h", "recall"])
            for class_id in sorted(self.curves):
                scores, prec, prec_h, rec = self.curves[class_id]
                for rank, row in enumerate(zip(scores, prec, prec_h, rec), start=1):
                    writer.writerow([class_id, rank, *(repr(float(v)) for v in row)])


def evaluate(
    dets_per_frame: Mapping[str, Sequence[Detection]],
    gts_per_frame: Mapping[str, Sequence[GroundTruthObject]],
    iou_thresholds: Optional[Mapping[int, float]] = None,
    default_threshold: float = DEFAULT_IOU_THRESHOLD,
    iou_type: str = "3d",
) -> EvalResult:
    """Pool matches over all frames and compute per-class AP / APH."""
    scores: dict[int, list] = {}
    tps: dict[int, list] = {}
    heads: dict[int, list] = {}
    num_gt: dict[int, int] = {}
    for frame_id in sorted(set(dets_per_frame) | set(gts_per_frame)):
        gts = list(gts_per_frame.get(frame_id, ()))
        dets = list(dets_per_frame.get(frame_id, ()))
        for gt in gts:
            num_gt[gt.class_id] = num_gt.get(gt.class_id, 0) + 1
        match = match_detections(dets, gts, iou_thresholds, default_threshold, iou_type)
        for k, det in enumerate(dets):
            scores.setdefault(det.class_id, []).append(det.score)
            tps.setdefault(det.class_id, []).append(float(match.gt_index[k] >= 0))
            heads.setdefault(det.class_id, []).append(match.heading[k])

    result = EvalResult()
    for class_id in sorted(set(num_gt) | set(scores)):
        s = scores.get(class_id, [])
        tp = tps.get(class_id, [])
        h = heads.get(class_id, [])
        n = num_gt.get(class_id, 0)
        ap = average_precision(s, tp, h, n)
        aph = average_precision(s, tp, h, n, heading_weighted=True)
        result.per_class[class_id] = ClassMetrics(ap, aph, n, len(s))
        if n > 0 and s:
            prec, rec = pr_curve(s, tp, h, n)
            prec_h, _ = pr_curve(s, tp, h, n, heading_weighted=True)
            result.curves[class_id] = (np.sort(np.asarray(s))[::-1], prec, prec_h, rec)
    scored = [m for m in result.per_class.values() if m.num_gt > 0]
    if scored:
        result.mAP = math.fsum(m.ap for m in scored) / len(scored)
        result.mAPH = math.fsum(m.aph for m in scored) / len(scored)
    return result


class DetectionEvaluator(BaseEstimator):
    """Hold ground truth from ``fit`` and score detections against it.

    ``score`` returns mAPH so the evaluator can rank detector configurations.
    """

    def __init__(self, iou_thresholds=None, default_threshold: float = DEFAULT_IOU_THRESHOLD, iou_type: str = "3d"):
        self.iou_thresholds = iou_thresholds
        self.default_threshold = default_threshold
        self.iou_type = iou_type

    def fit(self, gts_per_frame: Mapping[str, Sequence[GroundTruthObject]], y=None):
        self.gts_per_frame_ = {k: list(v) for k, v in gts_per_frame.items()}
        return self

    def evaluate(self, dets_per_frame) -> EvalResult:
        check_is_fitted(self, "gts_per_frame_")
        return evaluate(dets_per_frame, self.gts_per_frame_, self.iou_thresholds, self.default_threshold, self.iou_type)

    def score(self, dets_per_frame, y=None) -> float:
        return self.evaluate(dets_per_frame).mAPH
