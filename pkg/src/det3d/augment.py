"""Test-time augmentation algebra and training-time scene augmentation.

A :class:`TtaTransform` acts on a point as rotate about z by ``yaw``, then
scale uniformly, then shift along z. Its inverse has the same form, so
transforms can be inverted and compared field by field.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .geom import Box3D, bev_iou, from_box_frame, to_box_frame
from .pointcloud import PointCloud
from .structures import Detection, GroundTruthObject

DEFAULT_TTA_YAWS = (0.0, -0.13 * math.pi, -0.07 * math.pi, 0.07 * math.pi)
DEFAULT_TTA_SCALES = (0.95, 1.05)
DEFAULT_TTA_Z_OFFSETS = (-0.2, 0.2)


@dataclass(frozen=True)
class TtaTransform:
    yaw: float = 0.0
    scale: float = 1.0
    z_offset: float = 0.0

    def __post_init__(self):
        for name in ("yaw", "scale", "z_offset"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, value)
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    def inverse(self) -> "TtaTransform":
        # p = R(-yaw)(q - dz)/s = (1/s) R(-yaw) q - dz/s along z
        return TtaTransform(-self.yaw, 1.0 / self.scale, -self.z_offset / self.scale)

    @property
    def is_identity(self) -> bool:
        return self.yaw == 0.0 and self.scale == 1.0 and self.z_offset == 0.0


def tta_set(yaws: Sequence[float], scales: Sequence[float], z_offsets: Sequence[float]) -> list[TtaTransform]:
    """Cross product of the three families, yaw-major."""
    for name, values in (("yaws", yaws), ("scales", scales), ("z_offsets", z_offsets)):
        if len(values) == 0:
            raise ValueError(f"{name} must not be empty")
    return [TtaTransform(y, s, z) for y, s, z in itertools.product(yaws, scales, z_offsets)]


def default_tta_set() -> list[TtaTransform]:
    return tta_set(DEFAULT_TTA_YAWS, DEFAULT_TTA_SCALES, DEFAULT_TTA_Z_OFFSETS)


def _apply_xyz(t: TtaTransform, xyz: np.ndarray) -> np.ndarray:
    c, s = math.cos(t.yaw), math.sin(t.yaw)
    x = (c * xyz[:, 0] - s * xyz[:, 1]) * t.scale
    y = (s * xyz[:, 0] + c * xyz[:, 1]) * t.scale
    z = xyz[:, 2] * t.scale + t.z_offset
    return np.stack([x, y, z], axis=1)


def apply_to_points(t: TtaTransform, points: np.ndarray) -> np.ndarray:
    out = np.array(points, dtype=np.float64, copy=True)
    out[:, :3] = _apply_xyz(t, out[:, :3])
    return out


def apply_to_cloud(t: TtaTransform, cloud: PointCloud) -> PointCloud:
    return cloud.with_points(apply_to_points(t, cloud.points))


def apply_to_box(t: TtaTransform, box: Box3D) -> Box3D:
    (cx, cy, cz), = _apply_xyz(t, box.center[None, :])
    return Box3D(
        cx, cy, cz,
        box.length * t.scale, box.width * t.scale, box.height * t.scale,
        box.yaw + t.yaw,
    )


def inverse_to_box(t: TtaTransform, box: Box3D) -> Box3D:
    """Map a box predicted on the augmented input back to the original frame."""
    c, s = math.cos(t.yaw), math.sin(t.yaw)
    x, y = box.cx / t.scale, box.cy / t.scale
    return Box3D(
        c * x + s * y,
        -s * x + c * y,
        (box.cz - t.z_offset) / t.scale,
        box.length / t.scale,
        box.width / t.scale,
        box.height / t.scale,
        box.yaw - t.yaw,
    )


def inverse_to_detections(t: TtaTransform, dets: Sequence[Detection]) -> list[Detection]:
    return [
        Detection(inverse_to_box(t, d.box), d.class_id, d.score, d.model_id, d.frame_id)
        for d in dets
    ]


class TestTimeAugmenter(BaseEstimator):
    """Expand a cloud into TTA variants and map predictions back.

    ``transform`` returns one cloud per variant in the deterministic
    ``tta_set`` order; ``inverse_transform`` takes per-variant detection
    lists in the same order and returns them pooled in the original frame.
    """

    __test__ = False  # not a pytest class

    def __init__(self, yaws=DEFAULT_TTA_YAWS, scales=DEFAULT_TTA_SCALES, z_offsets=DEFAULT_TTA_Z_OFFSETS):
        self.yaws = yaws
        self.scales = scales
        self.z_offsets = z_offsets

    def fit(self, X=None, y=None):
        self.transforms_ = tta_set(self.yaws, self.scales, self.z_offsets)
        self.n_variants_ = len(self.transforms_)
        return self

    def _transforms(self):
        if not hasattr(self, "transforms_"):
            self.fit()
        return self.transforms_

    def transform(self, cloud: PointCloud) -> list[PointCloud]:
        return [apply_to_cloud(t, cloud) for t in self._transforms()]

    def inverse_transform(self, variant_detections: Sequence[Sequence[Detection]]) -> list[Detection]:
        transforms = self._transforms()
        if len(variant_detections) != len(transforms):
            raise ValueError(
                f"expected detections for {len(transforms)} variants, got {len(variant_detections)}"
            )
        pooled = []
        for t, dets in zip(transforms, variant_detections):
            pooled.extend(inverse_to_detections(t, dets))
        return pooled


@dataclass(frozen=True)
class AugmentParams:
    """Ranges for global scene augmentation; defaults follow the training recipe."""

    flip_axes: tuple = ("x", "y")
    scale_range: tuple = (0.95, 1.05)
    rotation_range: tuple = (-math.pi / 4, math.pi / 4)
    translation_range: tuple = (-0.5, 0.5)
    seed: int = 0

    def __post_init__(self):
        axes = tuple(self.flip_axes)
        if not set(axes) <= {"x", "y"}:
            raise ValueError(f"flip axes must be drawn from {{'x', 'y'}}, got {axes}")
        object.__setattr__(self, "flip_axes", axes)
        for name in ("scale_range", "rotation_range", "translation_range"):
            lo, hi = (float(v) for v in getattr(self, name))
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ValueError(f"{name} must be a finite [lo, hi] with lo <= hi")
            object.__setattr__(self, name, (lo, hi))
        if self.scale_range[0] <= 0:
            raise ValueError("scale_range must be positive")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentParams":
        return cls((), (1.0, 1.0), (0.0, 0.0), (0.0, 0.0), seed)


def flip_scene(points: np.ndarray, boxes: Sequence[Box3D], axis: str):
    """Mirror across the x axis (``y -> -y``) or the y axis (``x -> -x``)."""
    points = np.array(points, dtype=np.float64, copy=True)
    if axis == "x":
        points[:, 1] = -points[:, 1]
        boxes = [Box3D(b.cx, -b.cy, b.cz, b.length, b.width, b.height, -b.yaw) for b in boxes]
    elif axis == "y":
        points[:, 0] = -points[:, 0]
        boxes = [Box3D(-b.cx, b.cy, b.cz, b.length, b.width, b.height, math.pi - b.yaw) for b in boxes]
    else:
        raise ValueError(f"flip axis must be 'x' or 'y', got {axis!r}")
    return points, boxes


def _rotate_scale_shift(points, boxes, angle, scale, shift):
    c, s = math.cos(angle), math.sin(angle)
    points = np.array(points, dtype=np.float64, copy=True)
    x, y = points[:, 0].copy(), points[:, 1].copy()
    points[:, 0] = (c * x - s * y) * scale + shift[0]
    points[:, 1] = (s * x + c * y) * scale + shift[1]
    points[:, 2] = points[:, 2] * scale + shift[2]
    out = []
    for b in boxes:
        out.append(
            Box3D(
                (c * b.cx - s * b.cy) * scale + shift[0],
                (s * b.cx + c * b.cy) * scale + shift[1],
                b.cz * scale + shift[2],
                b.length * scale,
                b.width * scale,
                b.height * scale,
                b.yaw + angle,
            )
        )
    return points, out


def random_augment(cloud: PointCloud, objects: Sequence[GroundTruthObject], params: AugmentParams):
    """Apply one random global flip/rotate/scale/translate to points and boxes.

    Every random number is drawn on every call, in a fixed order, so the
    stream does not depend on which augmentations are enabled.
    """
    rng = np.random.default_rng(params.seed)
    flip_x, flip_y = rng.random(2) < 0.5
    angle = rng.uniform(*params.rotation_range)
    scale = rng.uniform(*params.scale_range)
    shift = rng.uniform(params.translation_range[0], params.translation_range[1], size=3)

    points = cloud.points
    boxes = [o.box for o in objects]
    if "x" in params.flip_axes and flip_x:
        points, boxes = flip_scene(points, boxes, "x")
    if "y" in params.flip_axes and flip_y:
        points, boxes = flip_scene(points, boxes, "y")
    points, boxes = _rotate_scale_shift(points, boxes, angle, scale, shift)
    new_objects = [GroundTruthObject(b, o.class_id, o.frame_id) for b, o in zip(boxes, objects)]
    return cloud.with_points(points), new_objects


@dataclass
class ObjectDbEntry:
    """A ground-truth box with its interior points in box-local coordinates."""

    box: Box3D
    class_id: int
    points: PointCloud

    def world_points(self, box: Optional[Box3D] = None) -> np.ndarray:
        """Interior points placed at ``box`` (default: the original pose)."""
        box = box or self.box
        pts = self.points.points.copy()
        pts[:, :3] = from_box_frame(box, pts[:, :3])
        return pts

    def to_record(self) -> dict:
        return {
            "class_id": self.class_id,
            "box": self.box.to_list(),
            "points": self.points.points.tolist(),
        }

    @classmethod
    def from_record(cls, record: dict, feature_dim: Optional[int] = None) -> "ObjectDbEntry":
        box = Box3D.from_array(record["box"])
        pts = np.asarray(record.get("points", []), dtype=np.float64)
        if pts.size == 0:
            cloud = PointCloud.empty(feature_dim or 0)
        else:
            cloud = PointCloud(pts)
        return cls(box, int(record["class_id"]), cloud)


def build_object_db(frames: Sequence[tuple[PointCloud, Sequence[GroundTruthObject]]]) -> list[ObjectDbEntry]:
    """One entry per object, holding the frame points strictly inside its box."""
    entries = []
    for cloud, objects in frames:
        for obj in objects:
            inside = obj.box.contains(cloud.xyz, strict=True)
            local = cloud.points[inside].copy()
            local[:, :3] = to_box_frame(obj.box, local[:, :3])
            entries.append(ObjectDbEntry(obj.box, obj.class_id, PointCloud(local, cloud.feature_dim)))
    return entries


def write_object_db(path, entries: Sequence[ObjectDbEntry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry.to_record(), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def read_object_db(path, feature_dim: Optional[int] = None) -> list[ObjectDbEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                entries.append(ObjectDbEntry.from_record(json.loads(line), feature_dim))
    return entries


@dataclass(frozen=True)
class FadingSchedule:
    """GT-paste runs for every epoch except the final ``fade_last`` (0-indexed epochs)."""

    total_epochs: int = 20
    fade_last: int = 5

    def __post_init__(self):
        if not 0 <= self.fade_last <= self.total_epochs:
            raise ValueError("need 0 <= fade_last <= total_epochs")

    def paste_enabled(self, epoch: int) -> bool:
        return epoch < self.total_epochs - self.fade_last

    @property
    def active_epochs(self) -> int:
        return self.total_epochs - self.fade_last


def paste_objects(
    scene: tuple[PointCloud, Sequence[GroundTruthObject]],
    db: Sequence[ObjectDbEntry],
    per_class_counts: Mapping[int, int],
    epoch: int,
    schedule: FadingSchedule,
    seed: int,
    placement: str = "original",
    resample_range: Optional[tuple] = None,
):
    """Paste database objects into a scene unless the fading schedule forbids it.

    Candidates whose pasted footprint overlaps any existing or already pasted
    box are rejected, so fewer than the requested objects may be added.
    ``placement="resample"`` draws a new BEV center inside ``resample_range``
    (``(xmin, ymin, xmax, ymax)``) and a new yaw; ``"original"`` keeps the
    stored pose.
    """
    cloud, objects = scene
    objects = list(objects)
    if not schedule.paste_enabled(epoch) or not db:
        return cloud, objects
    if placement not in ("original", "resample"):
        raise ValueError(f"unknown placement {placement!r}")
    if placement == "resample" and resample_range is None:
        raise ValueError("placement='resample' needs resample_range")

    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, entry in enumerate(db):
        by_class.setdefault(entry.class_id, []).append(i)

    occupied = [o.box for o in objects]
    new_points = [cloud.points]
    for class_id in sorted(per_class_counts):
        wanted = int(per_class_counts[class_id])
        pool = by_class.get(class_id, [])
        if wanted <= 0 or not pool:
            continue
        pasted = 0
        for k in rng.permutation(len(pool)):
            if pasted >= wanted:
                break
            entry = db[pool[k]]
            box = entry.box
            if placement == "resample":
                x0, y0, x1, y1 = resample_range
                box = Box3D(
                    rng.uniform(x0, x1), rng.uniform(y0, y1), box.cz,
                    box.length, box.width, box.height, rng.uniform(-math.pi, math.pi),
                )
            if any(bev_iou(box, other) > 0.0 for other in occupied):
                continue
            if entry.points.feature_dim != cloud.feature_dim:
                raise ValueError("database entry channels do not match the scene")
            occupied.append(box)
            objects.append(GroundTruthObject(box, entry.class_id, cloud.frame_id))
            new_points.append(entry.world_points(box))
            pasted += 1
    return cloud.with_points(np.vstack(new_points)), objects
