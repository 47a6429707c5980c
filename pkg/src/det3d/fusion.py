"""Combining overlapping detections: NMS, weighted box fusion, model ensembles."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from sklearn.base import BaseEstimator, TransformerMixin

from .geom import Box3D, get_iou_function
from .structures import Detection, group_by_class


def _ranked(dets: Sequence[Detection]) -> list[Detection]:
    # stable: equal scores keep their input order
    return sorted(dets, key=lambda d: -d.score)


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5, iou_type: str = "bev") -> list[Detection]:
    """Greedy non-maximum suppression for detections of a single class."""
    iou = get_iou_function(iou_type)
    kept: list[Detection] = []
    for det in _ranked(dets):
        if all(iou(k.box, det.box) <= iou_threshold for k in kept):
            kept.append(det)
    return kept


def _weighted_mean(values, weights) -> float:
    return math.fsum(v * w for v, w in zip(values, weights)) / math.fsum(weights)


def fuse_cluster(members: Sequence[Detection], yaw_mode: str = "full") -> Detection:
    """Score-weighted box average; the fused score is the plain member mean."""
    if yaw_mode not in ("full", "half"):
        raise ValueError(f"yaw_mode must be 'full' or 'half', got {yaw_mode!r}")
    if len(members) == 1:
        # exact pass-through; the weighted-mean round trip is not bit-exact
        lead = members[0]
        return Detection(lead.box, lead.class_id, lead.score, None, lead.frame_id)
    weights = [d.score for d in members]
    if math.fsum(weights) <= 0.0:
        weights = [1.0] * len(members)
    boxes = [d.box for d in members]
    fields = [
        _weighted_mean([getattr(b, name) for b in boxes], weights)
        for name in ("cx", "cy", "cz", "length", "width", "height")
    ]
    if yaw_mode == "full":
        s = math.fsum(w * math.sin(b.yaw) for b, w in zip(boxes, weights))
        c = math.fsum(w * math.cos(b.yaw) for b, w in zip(boxes, weights))
        yaw = math.atan2(s, c)
    else:
        s = math.fsum(w * math.sin(2 * b.yaw) for b, w in zip(boxes, weights))
        c = math.fsum(w * math.cos(2 * b.yaw) for b, w in zip(boxes, weights))
        yaw = 0.5 * math.atan2(s, c)
    score = math.fsum(d.score for d in members) / len(members)
    lead = members[0]
    return Detection(Box3D(*fields, yaw), lead.class_id, min(1.0, score), None, lead.frame_id)


def wbf(
    dets: Sequence[Detection],
    iou_match_threshold: float = 0.55,
    max_boxes: int = 500,
    iou_type: str = "bev",
    yaw_mode: str = "full",
) -> list[Detection]:
    """Weighted box fusion for detections of a single class.

    Detections are visited by descending score and join the first cluster
    whose current fused box overlaps them by more than the threshold.
    """
    iou = get_iou_function(iou_type)
    clusters: list[list[Detection]] = []
    fused: list[Detection] = []
    for det in _ranked(dets):
        for k, current in enumerate(fused):
            if iou(current.box, det.box) > iou_match_threshold:
                clusters[k].append(det)
                fused[k] = fuse_cluster(clusters[k], yaw_mode)
                break
        else:
            clusters.append([det])
            fused.append(fuse_cluster([det], yaw_mode))
    return _ranked(fused)[:max_boxes]


@dataclass
class EnsembleConfig:
    """Per-class model weights plus the WBF settings used after pooling."""

    classes: dict = field(default_factory=dict)
    iou_match_threshold: float = 0.55
    max_boxes: int = 500

    def __post_init__(self):
        classes = {}
        for class_id, weights in self.classes.items():
            weights = {str(m): float(w) for m, w in weights.items()}
            if any(w < 0 or not math.isfinite(w) for w in weights.values()):
                raise ValueError(f"class {class_id}: weights must be finite and >= 0")
            if not any(w > 0 for w in weights.values()):
                raise ValueError(f"class {class_id}: needs at least one positive weight")
            classes[int(class_id)] = weights
        self.classes = classes
        if not 0.0 <= self.iou_match_threshold <= 1.0:
            raise ValueError("iou_match_threshold must lie in [0, 1]")
        if int(self.max_boxes) < 1:
            raise ValueError("max_boxes must be positive")
        self.max_boxes = int(self.max_boxes)

    @property
    def model_ids(self) -> set:
        return {m for weights in self.classes.values() for m in weights}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "EnsembleConfig":
        unknown = set(doc) - {"classes", "iou_match_threshold", "max_boxes"}
        if unknown:
            raise ValueError(f"unknown ensemble config key: {sorted(unknown)[0]!r}")
        return cls(
            dict(doc.get("classes", {})),
            float(doc.get("iou_match_threshold", 0.55)),
            int(doc.get("max_boxes", 500)),
        )

    @classmethod
    def load(cls, path) -> "EnsembleConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {
            "classes": {str(c): dict(sorted(w.items())) for c, w in sorted(self.classes.items())},
            "iou_match_threshold": self.iou_match_threshold,
            "max_boxes": self.max_boxes,
        }


def ensemble_fuse(
    per_model: Mapping[str, Sequence[Detection]],
    config: EnsembleConfig,
    iou_type: str = "bev",
    yaw_mode: str = "full",
) -> list[Detection]:
    """Reweight each model's scores per class, pool, and run WBF per class."""
    known = config.model_ids
    for model_id in per_model:
        if model_id not in known:
            raise ValueError(f"unknown model_id {model_id!r}")
    pooled: dict[int, list[Detection]] = {}
    for model_id in sorted(per_model):
        for det in per_model[model_id]:
            weights = config.classes.get(det.class_id)
            if weights is None:
                raise ValueError(f"no ensemble weights configured for class {det.class_id}")
            if model_id not in weights:
                raise ValueError(f"class {det.class_id}: no weight for model {model_id!r}")
            w = weights[model_id]
            if w == 0.0:
                continue
            pooled.setdefault(det.class_id, []).append(
                Detection(det.box, det.class_id, min(1.0, det.score * w), model_id, det.frame_id)
            )
    out = []
    for class_id in sorted(pooled):
        out.extend(wbf(pooled[class_id], config.iou_match_threshold, config.max_boxes, iou_type, yaw_mode))
    return out


def per_class(fn, dets: Sequence[Detection], **kwargs) -> list[Detection]:
    """Run a single-class routine on each class in ascending class order."""
    out = []
    for _, group in group_by_class(dets).items():
        out.extend(fn(group, **kwargs))
    return out


class NonMaximumSuppression(TransformerMixin, BaseEstimator):
    """Class-aware NMS as a stateless transformer over detection lists."""

    def __init__(self, iou_threshold: float = 0.5, iou_type: str = "bev"):
        self.iou_threshold = iou_threshold
        self.iou_type = iou_type

    def fit(self, X=None, y=None):
        return self

    def transform(self, X: Sequence[Detection]) -> list[Detection]:
        return per_class(nms, X, iou_threshold=self.iou_threshold, iou_type=self.iou_type)


class WeightedBoxFusion(TransformerMixin, BaseEstimator):
    """Class-aware weighted box fusion as a stateless transformer."""

    def __init__(self, iou_match_threshold: float = 0.55, max_boxes: int = 500, iou_type: str = "bev", yaw_mode: str = "full"):
        self.iou_match_threshold = iou_match_threshold
        self.max_boxes = max_boxes
        self.iou_type = iou_type
        self.yaw_mode = yaw_mode

    def fit(self, X=None, y=None):
        return self

    def transform(self, X: Sequence[Detection]) -> list[Detection]:
        return per_class(
            wbf, X,
            iou_match_threshold=self.iou_match_threshold,
            max_boxes=self.max_boxes,
            iou_type=self.iou_type,
            yaw_mode=self.yaw_mode,
        )


class ModelEnsemble(TransformerMixin, BaseEstimator):
    """Per-class weighted multi-model fusion.

    ``transform`` takes a mapping ``model_id -> detections``.
    """

    def __init__(self, class_weights=None, iou_match_threshold: float = 0.55, max_boxes: int = 500, iou_type: str = "bev"):
        self.class_weights = class_weights
        self.iou_match_threshold = iou_match_threshold
        self.max_boxes = max_boxes
        self.iou_type = iou_type

    def fit(self, X=None, y=None):
        self.config_ = EnsembleConfig(dict(self.class_weights or {}), self.iou_match_threshold, self.max_boxes)
        return self

    def transform(self, X: Mapping[str, Sequence[Detection]]) -> list[Detection]:
        if not hasattr(self, "config_"):
            self.fit()
        return ensemble_fuse(X, self.config_, self.iou_type)
