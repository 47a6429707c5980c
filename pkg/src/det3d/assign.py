"""Target assignment for dense BEV detection heads.

Two strategies are provided: the baseline that labels only the cell holding
each object's center, and a budgeted greedy assignment driven by a
classification + regression cost matrix with per-object budgets derived
from IoU sums.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .geom import Box3D, get_iou_function
from .structures import Detection, GroundTruthObject

logger = logging.getLogger(__name__)

BACKGROUND = -1
PROB_EPS = 1e-7


class EmptyAssignmentError(ValueError):
    """No ground truths or no candidates were given to the cost builder."""


def bce(prob: float, label: int, eps: float = PROB_EPS) -> float:
    """Binary cross-entropy of one probability against a 0/1 label."""
    p = min(max(float(prob), eps), 1.0 - eps)
    if label:
        return -math.log(p)
    return -math.log1p(-p)


def bce_vector(probs: Sequence[float], class_id: int, eps: float = PROB_EPS) -> float:
    """Sum of per-class BCE against a one-hot target at ``class_id``."""
    return math.fsum(bce(p, int(k == class_id), eps) for k, p in enumerate(probs))


def encode_box(box: Box3D) -> np.ndarray:
    """The 8-slot regression vector ``(cx, cy, cz, l, w, h, sin yaw, cos yaw)``."""
    return np.array(
        [box.cx, box.cy, box.cz, box.length, box.width, box.height, math.sin(box.yaw), math.cos(box.yaw)]
    )


def l1_reg(pred_vec, gt_vec) -> float:
    pred = np.asarray(pred_vec, dtype=np.float64).ravel()
    gt = np.asarray(gt_vec, dtype=np.float64).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"dimension mismatch: {pred.shape} vs {gt.shape}")
    return math.fsum(np.abs(pred - gt).tolist())


@dataclass(frozen=True)
class Candidate:
    """A decoded location with its full class distribution."""

    box: Box3D
    class_probs: tuple
    iou_pred: float = 1.0
    location: tuple = ()

    @property
    def score(self) -> float:
        return max(self.class_probs)

    @property
    def class_id(self) -> int:
        return int(np.argmax(self.class_probs))


def build_cost_matrix(gts: Sequence[GroundTruthObject], candidates: Sequence[Candidate], eps: float = PROB_EPS) -> np.ndarray:
    """``C[i, j] = BCE(candidate j probs, one-hot gt i) + L1(encodings)``."""
    if len(gts) == 0 or len(candidates) == 0:
        raise EmptyAssignmentError(
            f"cost matrix needs at least one ground truth and one candidate "
            f"(got {len(gts)} and {len(candidates)})"
        )
    gt_codes = [encode_box(g.box) for g in gts]
    cand_codes = [encode_box(c.box) for c in candidates]
    cost = np.empty((len(gts), len(candidates)))
    for i, gt in enumerate(gts):
        for j, cand in enumerate(candidates):
            cost[i, j] = bce_vector(cand.class_probs, gt.class_id, eps) + l1_reg(cand_codes[j], gt_codes[i])
    return cost


def dynamic_k(ious) -> int:
    """Budget ``clamp(floor(sum(ious)), 1, M)`` for one ground truth."""
    ious = np.asarray(ious, dtype=np.float64).ravel()
    m = len(ious)
    if m == 0:
        raise ValueError("need at least one candidate IoU")
    if np.any((ious < 0) | (ious > 1)):
        raise ValueError("IoU values must lie in [0, 1]")
    return int(min(max(math.floor(math.fsum(ious.tolist())), 1), m))


@dataclass
class AssignmentResult:
    """``assigned[j]`` is a ground-truth index or ``BACKGROUND``."""

    assigned: np.ndarray
    budgets: np.ndarray
    used: np.ndarray

    @property
    def num_positive(self) -> int:
        return int(np.sum(self.assigned != BACKGROUND))

    def labels(self) -> list:
        return [f"gt{i}" if i != BACKGROUND else "BACKGROUND" for i in self.assigned.tolist()]


def ota_assign(cost, budgets) -> AssignmentResult:
    """Greedy budgeted assignment.

    Candidates are visited in ascending order of their cheapest cost over all
    ground truths (ties by candidate index). Each takes the cheapest ground
    truth that still has budget (ties by ground-truth index), or becomes
    background once every budget is spent.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be an N x M matrix")
    if not np.all(np.isfinite(cost)) or np.any(cost < 0):
        raise ValueError("cost entries must be finite and non-negative")
    n, m = cost.shape
    budgets = np.asarray(budgets, dtype=np.int64).ravel()
    if budgets.shape != (n,) or np.any(budgets < 0):
        raise ValueError(f"need {n} non-negative budgets")

    assigned = np.full(m, BACKGROUND, dtype=np.int64)
    used = np.zeros(n, dtype=np.int64)
    if n == 0 or m == 0:
        return AssignmentResult(assigned, budgets, used)

    order = np.lexsort((np.arange(m), cost.min(axis=0)))
    open_gts = budgets > 0
    for j in order:
        if not open_gts.any():
            break
        col = np.where(open_gts, cost[:, j], np.inf)
        i = int(np.argmin(col))  # first index on ties
        assigned[j] = i
        used[i] += 1
        if used[i] >= budgets[i]:
            open_gts[i] = False
    return AssignmentResult(assigned, budgets, used)


@dataclass(frozen=True)
class BevGridSpec:
    """Geometry of the dense BEV output map. Rows index y, columns index x."""

    height: int
    width: int
    stride: tuple = (0.8, 0.8)
    origin: tuple = (-75.2, -75.2)
    num_classes: int = 3

    def cell_of(self, x: float, y: float) -> tuple[int, int, float, float]:
        """``(row, col, offset_x, offset_y)`` with offsets in cell units from the cell corner."""
        fx = (x - self.origin[0]) / self.stride[0]
        fy = (y - self.origin[1]) / self.stride[1]
        col, row = math.floor(fx), math.floor(fy)
        return row, col, fx - col, fy - row

    def contains(self, row: int, col: int) -> bool:
        return 0 <= row < self.height and 0 <= col < self.width


@dataclass
class TargetGrid:
    """Training targets on the BEV grid for the center-only baseline."""

    spec: BevGridSpec
    heatmap: np.ndarray
    positive: np.ndarray
    gt_index: np.ndarray
    offset: np.ndarray
    z: np.ndarray
    size: np.ndarray
    orientation: np.ndarray
    regression: np.ndarray
    class_id: np.ndarray
    skipped: int = 0


def gaussian_radius(box: Box3D, spec: BevGridSpec, min_radius: float = 2.0) -> float:
    diag_cells = math.hypot(box.length / spec.stride[0], box.width / spec.stride[1])
    return max(min_radius, 0.5 * diag_cells)


def _draw_gaussian(heat: np.ndarray, row: int, col: int, radius: float) -> None:
    sigma = radius / 3.0
    r = int(math.ceil(radius))
    h, w = heat.shape
    r0, r1 = max(0, row - r), min(h, row + r + 1)
    c0, c1 = max(0, col - r), min(w, col + r + 1)
    dy = np.arange(r0, r1)[:, None] - row
    dx = np.arange(c0, c1)[None, :] - col
    d2 = dx * dx + dy * dy
    g = np.exp(-d2 / (2.0 * sigma * sigma))
    g[d2 > radius * radius] = 0.0
    np.maximum(heat[r0:r1, c0:c1], g, out=heat[r0:r1, c0:c1])


def center_assign(gts: Sequence[GroundTruthObject], spec: BevGridSpec, min_radius: float = 2.0) -> TargetGrid:
    """Label the single cell containing each center and splat a class heatmap.

    If two objects fall in the same cell, the later one overwrites the
    regression targets of the earlier one.
    """
    h, w, k = spec.height, spec.width, spec.num_classes
    heatmap = np.zeros((k, h, w))
    positive = np.zeros((h, w), dtype=bool)
    gt_index = np.full((h, w), BACKGROUND, dtype=np.int64)
    offset = np.zeros((2, h, w))
    z = np.zeros((h, w))
    size = np.zeros((3, h, w))
    orientation = np.zeros((2, h, w))
    regression = np.zeros((8, h, w))
    class_id = np.full((h, w), BACKGROUND, dtype=np.int64)
    skipped = 0
    for i, gt in enumerate(gts):
        row, col, ox, oy = spec.cell_of(gt.box.cx, gt.box.cy)
        if not spec.contains(row, col) or not 0 <= gt.class_id < k:
            skipped += 1
            continue
        _draw_gaussian(heatmap[gt.class_id], row, col, gaussian_radius(gt.box, spec, min_radius))
        positive[row, col] = True
        gt_index[row, col] = i
        class_id[row, col] = gt.class_id
        offset[:, row, col] = (ox, oy)
        z[row, col] = gt.box.cz
        size[:, row, col] = (gt.box.length, gt.box.width, gt.box.height)
        orientation[:, row, col] = (math.sin(gt.box.yaw), math.cos(gt.box.yaw))
        regression[:, row, col] = encode_box(gt.box)
    if skipped:
        logger.warning("center_assign skipped %d objects outside the grid", skipped)
    return TargetGrid(spec, heatmap, positive, gt_index, offset, z, size, orientation, regression, class_id, skipped)


@dataclass
class PredictionGrid:
    """Dense head outputs, channels first: ``class_probs`` is ``(K, H, W)``."""

    class_probs: np.ndarray
    xy_offset: np.ndarray
    z: np.ndarray
    size: np.ndarray
    orientation: np.ndarray
    iou: np.ndarray
    stride: tuple = (0.8, 0.8)
    origin: tuple = (-75.2, -75.2)

    def __post_init__(self):
        self.class_probs = np.asarray(self.class_probs, dtype=np.float64)
        if self.class_probs.ndim != 3:
            raise ValueError("class_probs must be (K, H, W)")
        _, h, w = self.class_probs.shape
        for name, lead in (("xy_offset", 2), ("size", 3), ("orientation", 2)):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (lead, h, w):
                raise ValueError(f"{name} must have shape {(lead, h, w)}, got {arr.shape}")
            setattr(self, name, arr)
        for name in ("z", "iou"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (h, w):
                raise ValueError(f"{name} must have shape {(h, w)}, got {arr.shape}")
            setattr(self, name, arr)
        if np.any((self.class_probs < 0) | (self.class_probs > 1)):
            raise ValueError("class probabilities must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.class_probs.shape[1:]

    @classmethod
    def from_targets(cls, targets: TargetGrid) -> "PredictionGrid":
        """A perfect prediction: probability 1 at positives, 0 elsewhere."""
        probs = np.zeros_like(targets.heatmap)
        rows, cols = np.nonzero(targets.positive)
        probs[targets.class_id[rows, cols], rows, cols] = 1.0
        orient = targets.orientation.copy()
        orient[1][~targets.positive] = 1.0
        size = targets.size.copy()
        for c in range(3):
            size[c][~targets.positive] = 1.0
        return cls(
            probs, targets.offset, targets.z, size, orient,
            targets.positive.astype(np.float64), targets.spec.stride, targets.spec.origin,
        )


def score_rectify(score: float, iou_pred: float, alpha: float = 0.0) -> float:
    """Blend classification score with predicted IoU: ``score^(1-a) * iou^a``."""
    if alpha == 0.0:
        return float(score)
    if alpha == 1.0:
        return float(iou_pred)
    return float(score) ** (1.0 - alpha) * float(iou_pred) ** alpha


def _box_at(grid: PredictionGrid, row: int, col: int) -> Box3D:
    cx = grid.origin[0] + (col + grid.xy_offset[0, row, col]) * grid.stride[0]
    cy = grid.origin[1] + (row + grid.xy_offset[1, row, col]) * grid.stride[1]
    s, c = grid.orientation[:, row, col]
    l, w, h = grid.size[:, row, col]
    return Box3D(cx, cy, grid.z[row, col], l, w, h, math.atan2(s, c))


def _ranked_locations(grid: PredictionGrid, score_threshold: Optional[float], limit: int):
    best = grid.class_probs.max(axis=0).ravel()
    flat = np.arange(best.size)
    if score_threshold is not None:
        keep = best > score_threshold
        best, flat = best[keep], flat[keep]
    order = np.lexsort((flat, -best))[:limit]
    w = grid.shape[1]
    return [(int(f) // w, int(f) % w) for f in flat[order]]


def decode(grid: PredictionGrid, score_threshold: float = 0.1, max_outputs: int = 500, alpha: float = 0.0) -> list[Detection]:
    """Turn locations whose best class probability exceeds the threshold into boxes."""
    dets = []
    for row, col in _ranked_locations(grid, score_threshold, max_outputs):
        probs = grid.class_probs[:, row, col]
        k = int(np.argmax(probs))
        score = score_rectify(float(probs[k]), float(grid.iou[row, col]), alpha)
        dets.append(Detection(_box_at(grid, row, col), k, score))
    if alpha:
        dets.sort(key=lambda d: -d.score)
    return dets


def decode_candidates(grid: PredictionGrid, top_m: int = 512) -> list[Candidate]:
    """The ``top_m`` locations by best class probability, unthresholded."""
    out = []
    for row, col in _ranked_locations(grid, None, top_m):
        out.append(
            Candidate(
                _box_at(grid, row, col),
                tuple(grid.class_probs[:, row, col].tolist()),
                float(grid.iou[row, col]),
                (row, col),
            )
        )
    return out


def candidate_ious(gts: Sequence[GroundTruthObject], candidates: Sequence[Candidate], iou_type: str = "3d") -> np.ndarray:
    fn = get_iou_function(iou_type)
    return np.array([[fn(g.box, c.box) for c in candidates] for g in gts]).reshape(len(gts), len(candidates))


class DynamicKAssigner(BaseEstimator):
    """Budgeted greedy assigner in estimator form.

    ``fit(candidates, gts)`` stores ``cost_matrix_``, ``ious_``, ``budgets_``
    and ``labels_`` (ground-truth index per candidate, ``-1`` for background).
    ``candidates`` may also be a :class:`PredictionGrid`, in which case the
    ``top_m`` best locations are used.
    """

    def __init__(self, iou_type: str = "3d", top_m: int = 512, eps: float = PROB_EPS):
        self.iou_type = iou_type
        self.top_m = top_m
        self.eps = eps

    def fit(self, candidates, gts):
        if isinstance(candidates, PredictionGrid):
            candidates = decode_candidates(candidates, self.top_m)
        gts = list(gts)
        self.candidates_ = list(candidates)
        self.cost_matrix_ = build_cost_matrix(gts, self.candidates_, self.eps)
        self.ious_ = candidate_ious(gts, self.candidates_, self.iou_type)
        self.budgets_ = np.array([dynamic_k(row) for row in self.ious_], dtype=np.int64)
        self.result_ = ota_assign(self.cost_matrix_, self.budgets_)
        self.labels_ = self.result_.assigned
        return self

    def fit_predict(self, candidates, gts) -> np.ndarray:
        return self.fit(candidates, gts).labels_

    def predict(self, candidates=None, gts=None) -> np.ndarray:
        if candidates is not None:
            return self.fit_predict(candidates, gts)
        check_is_fitted(self, "labels_")
        return self.labels_
