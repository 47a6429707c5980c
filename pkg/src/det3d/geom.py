"""Oriented box geometry in the bird's-eye-view plane and in 3D.

Boxes follow the usual lidar convention: ``length`` runs along the box's
local x axis, ``width`` along local y, and ``yaw`` is a counterclockwise
rotation about +z, kept in ``(-pi, pi]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi

# vertices closer than this are merged after clipping
MERGE_TOL = 1e-9
# intersection areas below this are reported as exactly zero
AREA_FLOOR = 1e-12
# tilt of the z axis tolerated by transform_box
TILT_TOL = 1e-6


def wrap_angle(theta: float) -> float:
    """Wrap an angle into ``(-pi, pi]``; ``-pi`` maps to ``pi``."""
    theta = float(theta)
    if not math.isfinite(theta):
        raise ValueError(f"angle must be finite, got {theta!r}")
    if -math.pi < theta <= math.pi:
        return theta
    out = math.pi - ((math.pi - theta) % TWO_PI)
    if out <= -math.pi:
        out += TWO_PI
    return out


def wrap_angles(theta) -> np.ndarray:
    """Vectorised :func:`wrap_angle`."""
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise ValueError("angles must be finite")
    out = math.pi - np.mod(math.pi - theta, TWO_PI)
    out = np.where(out <= -math.pi, out + TWO_PI, out)
    return np.where((theta > -math.pi) & (theta <= math.pi), theta, out)


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box. ``yaw`` is normalised on construction."""

    cx: float
    cy: float
    cz: float
    length: float
    width: float
    height: float
    yaw: float = 0.0

    def __post_init__(self):
        for name in ("cx", "cy", "cz", "length", "width", "height", "yaw"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"Box3D.{name} must be finite, got {value!r}")
            object.__setattr__(self, name, value)
        if self.length <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError(
                "box dimensions must be positive, got "
                f"({self.length}, {self.width}, {self.height})"
            )
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Box3D":
        if len(values) != 7:
            raise ValueError(f"expected 7 box values, got {len(values)}")
        return cls(*(float(v) for v in values))

    def to_array(self) -> np.ndarray:
        return np.array(
            [self.cx, self.cy, self.cz, self.length, self.width, self.height, self.yaw]
        )

    def to_list(self) -> list[float]:
        return [self.cx, self.cy, self.cz, self.length, self.width, self.height, self.yaw]

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    @property
    def z_min(self) -> float:
        return self.cz - 0.5 * self.height

    @property
    def z_max(self) -> float:
        return self.cz + 0.5 * self.height

    def contains(self, points, strict: bool = False, tol: float = 0.0) -> np.ndarray:
        """Boolean mask of which ``points`` (N x >=3) fall inside the box."""
        local = to_box_frame(self, np.asarray(points, dtype=np.float64)[:, :3])
        half = np.array([self.length, self.width, self.height]) * 0.5 + tol
        if strict:
            return np.all(np.abs(local) < half, axis=1)
        return np.all(np.abs(local) <= half, axis=1)


def to_box_frame(box: Box3D, xyz: np.ndarray) -> np.ndarray:
    """Express world points in the box-local frame (center at origin, yaw 0)."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = xyz[:, 0] - box.cx
    dy = xyz[:, 1] - box.cy
    return np.stack([c * dx + s * dy, -s * dx + c * dy, xyz[:, 2] - box.cz], axis=1)


def from_box_frame(box: Box3D, xyz: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_box_frame`."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    x, y = xyz[:, 0], xyz[:, 1]
    return np.stack(
        [c * x - s * y + box.cx, s * x + c * y + box.cy, xyz[:, 2] + box.cz], axis=1
    )


def rotation_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion ``x -> R x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64)
        trans = np.array(self.translation, dtype=np.float64).reshape(-1)
        if rot.shape != (3, 3) or trans.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise ValueError("transform entries must be finite")
        if not np.allclose(rot.T @ rot, np.eye(3), rtol=0.0, atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ValueError("rotation must have determinant +1")
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(rotation_z(yaw), np.asarray(translation, dtype=np.float64))

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    @property
    def tilt(self) -> float:
        """Angle between the rotated z axis and +z."""
        return math.acos(min(1.0, max(-1.0, float(self.rotation[2, 2]))))

    def apply(self, xyz) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64)
        return xyz @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


def transform_box(box: Box3D, t: RigidTransform) -> Box3D:
    """Move a box rigidly. Only rotations about z are accepted."""
    if t.tilt > TILT_TOL:
        raise ValueError(
            f"transform tilts the z axis by {t.tilt:.3g} rad; only z rotations "
            "can be applied to yaw-only boxes"
        )
    cx, cy, cz = t.apply(box.center)
    return Box3D(cx, cy, cz, box.length, box.width, box.height, box.yaw + t.yaw)


@dataclass(frozen=True)
class ConvexPolygon2D:
    """Convex polygon with counterclockwise vertices (possibly empty)."""

    vertices: np.ndarray

    def __post_init__(self):
        verts = np.array(self.vertices, dtype=np.float64).reshape(-1, 2)
        if 0 < len(verts) < 3:
            raise ValueError("a non-empty polygon needs at least 3 vertices")
        if len(verts) and _signed_area(verts) < -MERGE_TOL:
            raise ValueError("polygon vertices must be counterclockwise")
        verts.flags.writeable = False
        object.__setattr__(self, "vertices", verts)

    def __len__(self):
        return len(self.vertices)

    @property
    def area(self) -> float:
        if len(self.vertices) == 0:
            return 0.0
        return max(0.0, _signed_area(self.vertices))


def _signed_area(verts: np.ndarray) -> float:
    x, y = verts[:, 0], verts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _shoelace(points: list[tuple[float, float]]) -> float:
    total = 0.0
    n = len(points)
    for i in range(n):
        x0, y0 = points[i]
        x1, y1 = points[(i + 1) % n]
        total += x0 * y1 - x1 * y0
    return 0.5 * total


def box_corners_bev(box: Box3D) -> ConvexPolygon2D:
    """Footprint corners, counterclockwise from the local (+l/2, +w/2) corner."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw = 0.5 * box.length, 0.5 * box.width
    local = ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
    return ConvexPolygon2D(
        np.array([[box.cx + c * x - s * y, box.cy + s * x + c * y] for x, y in local])
    )


def _clip(subject: list, clipper: list) -> list:
    # Sutherland-Hodgman against each edge of a counterclockwise clipper
    output = subject
    n = len(clipper)
    for k in range(n):
        if not output:
            break
        ax, ay = clipper[k]
        bx, by = clipper[(k + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = output
        output = []
        px, py = inp[-1]
        pside = ex * (py - ay) - ey * (px - ax)
        for qx, qy in inp:
            qside = ex * (qy - ay) - ey * (qx - ax)
            if qside >= 0.0:
                if pside < 0.0:
                    r = pside / (pside - qside)
                    output.append((px + r * (qx - px), py + r * (qy - py)))
                output.append((qx, qy))
            elif pside >= 0.0:
                r = pside / (pside - qside)
                output.append((px + r * (qx - px), py + r * (qy - py)))
            px, py, pside = qx, qy, qside
    return output


def _merge_close(points: list) -> list:
    merged = []
    for p in points:
        if merged and abs(p[0] - merged[-1][0]) <= MERGE_TOL and abs(p[1] - merged[-1][1]) <= MERGE_TOL:
            continue
        merged.append(p)
    while (
        len(merged) > 1
        and abs(merged[0][0] - merged[-1][0]) <= MERGE_TOL
        and abs(merged[0][1] - merged[-1][1]) <= MERGE_TOL
    ):
        merged.pop()
    return merged


def _as_key(poly: ConvexPolygon2D) -> tuple:
    return tuple(poly.vertices.ravel().tolist())


def polygon_intersection_area(a: ConvexPolygon2D, b: ConvexPolygon2D) -> float:
    """Area of the intersection of two convex polygons.

    Arguments are put in a canonical order first so that swapping them gives
    a bit-identical answer.
    """
    if len(a) == 0 or len(b) == 0:
        return 0.0
    ka, kb = _as_key(a), _as_key(b)
    if ka == kb:
        return a.area
    if kb < ka:
        a, b = b, a
    va, vb = a.vertices, b.vertices
    lo_a, hi_a = va.min(axis=0), va.max(axis=0)
    lo_b, hi_b = vb.min(axis=0), vb.max(axis=0)
    if np.any(hi_a <= lo_b) or np.any(hi_b <= lo_a):
        return 0.0
    clipped = _merge_close(_clip([tuple(p) for p in va.tolist()], [tuple(p) for p in vb.tolist()]))
    if len(clipped) < 3:
        return 0.0
    area = _shoelace(clipped)
    if area < AREA_FLOOR:
        return 0.0
    return min(area, a.area, b.area)


def _canonical_pair(a: Box3D, b: Box3D) -> tuple[Box3D, Box3D]:
    return (b, a) if b.to_list() < a.to_list() else (a, b)


def _footprints(a: Box3D, b: Box3D):
    """Both footprints and their overlap area, or ``None`` when far apart."""
    reach = 0.5 * (math.hypot(a.length, a.width) + math.hypot(b.length, b.width))
    if math.hypot(a.cx - b.cx, a.cy - b.cy) >= reach:
        return None
    pa, pb = box_corners_bev(a), box_corners_bev(b)
    return pa, pb, polygon_intersection_area(pa, pb)


def bev_intersection(a: Box3D, b: Box3D) -> float:
    """Overlap area of the two footprints in m^2."""
    a, b = _canonical_pair(a, b)
    found = _footprints(a, b)
    return 0.0 if found is None else found[2]


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Intersection over union of the two footprints."""
    a, b = _canonical_pair(a, b)
    found = _footprints(a, b)
    if found is None or found[2] == 0.0:
        return 0.0
    pa, pb, inter = found
    return min(1.0, max(0.0, inter / (pa.area + pb.area - inter)))


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volumetric IoU of two yaw-only boxes."""
    a, b = _canonical_pair(a, b)
    dz = min(a.z_max, b.z_max) - max(a.z_min, b.z_min)
    if dz <= 0.0:
        return 0.0
    found = _footprints(a, b)
    if found is None or found[2] == 0.0:
        return 0.0
    pa, pb, inter = found
    inter *= dz
    union = pa.area * a.height + pb.area * b.height - inter
    return min(1.0, max(0.0, inter / union))


IOU_FUNCTIONS = {"bev": bev_iou, "3d": iou_3d}


def get_iou_function(kind: str):
    try:
        return IOU_FUNCTIONS[kind]
    except KeyError:
        raise ValueError(f"iou type must be one of {sorted(IOU_FUNCTIONS)}, got {kind!r}") from None


def pairwise_iou(boxes_a: Sequence[Box3D], boxes_b: Sequence[Box3D], kind: str = "3d") -> np.ndarray:
    """Dense ``len(a) x len(b)`` IoU matrix."""
    fn = get_iou_function(kind)
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = fn(a, b)
    return out
