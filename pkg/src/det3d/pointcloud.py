"""Point clouds, range cropping, mean-pooled voxelisation and frame fusion."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .geom import RigidTransform
from .validation import check_points

PCF_MAGIC = b"PCF1"
_HEADER = struct.Struct("<4sII")

# slack for extents that are an integer number of voxels up to rounding
_DIMS_SLACK = 1e-9


class PointCloudFormatError(ValueError):
    """Malformed PCF1 data; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


@dataclass
class PointCloud:
    """Rows are ``[x, y, z, extra_0, ..., extra_{feature_dim-1}]``."""

    points: np.ndarray
    feature_dim: Optional[int] = None
    frame_id: str = ""
    pose: Optional[RigidTransform] = None

    def __post_init__(self):
        arr = np.asarray(self.points, dtype=np.float64)
        if arr.size == 0:
            width = 3 + (self.feature_dim or 0)
            arr = arr.reshape(0, width)
        arr = check_points(arr)
        if self.feature_dim is None:
            self.feature_dim = arr.shape[1] - 3
        if arr.shape[1] != 3 + self.feature_dim:
            raise ValueError(
                f"points have {arr.shape[1] - 3} extra channels, "
                f"cloud declares {self.feature_dim}"
            )
        self.points = arr

    def __len__(self):
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def extra(self) -> np.ndarray:
        return self.points[:, 3:]

    @property
    def channels(self) -> int:
        return 3 + self.feature_dim

    def with_points(self, points) -> "PointCloud":
        return PointCloud(points, self.feature_dim, self.frame_id, self.pose)

    @classmethod
    def empty(cls, feature_dim: int = 0, frame_id: str = "") -> "PointCloud":
        return cls(np.zeros((0, 3 + feature_dim)), feature_dim, frame_id)


@dataclass(frozen=True)
class VoxelGridSpec:
    """Axis-aligned grid over ``[min, max)`` per axis."""

    min: tuple = (-75.2, -75.2, -2.0)
    max: tuple = (75.2, 75.2, 4.0)
    voxel_size: tuple = (0.1, 0.1, 0.15)

    def __post_init__(self):
        lo = tuple(float(v) for v in self.min)
        hi = tuple(float(v) for v in self.max)
        size = tuple(float(v) for v in self.voxel_size)
        if not (len(lo) == len(hi) == len(size) == 3):
            raise ValueError("grid bounds and voxel size need three values each")
        if not all(math.isfinite(v) for v in lo + hi + size):
            raise ValueError("grid bounds must be finite")
        for axis in range(3):
            if hi[axis] <= lo[axis]:
                raise ValueError(f"axis {axis}: max must exceed min")
            if size[axis] <= 0:
                raise ValueError(f"axis {axis}: voxel size must be positive")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)
        object.__setattr__(self, "voxel_size", size)
        if min(self.dims) < 1:
            raise ValueError(f"grid has an empty axis: dims {self.dims}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(
            int(math.floor((hi - lo) / s + _DIMS_SLACK))
            for lo, hi, s in zip(self.min, self.max, self.voxel_size)
        )

    @property
    def num_cells(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def cell_bounds(self, index) -> tuple[np.ndarray, np.ndarray]:
        lo = np.asarray(self.min) + np.asarray(index) * np.asarray(self.voxel_size)
        return lo, lo + np.asarray(self.voxel_size)

    def to_dict(self) -> dict:
        return {"min": list(self.min), "max": list(self.max), "voxel_size": list(self.voxel_size)}


@dataclass
class VoxelGrid:
    """Sparse voxel cells sorted by linear index.

    ``features`` holds per-cell means over ``[x, y, z, extra...]``.
    """

    spec: VoxelGridSpec
    indices: np.ndarray
    features: np.ndarray
    counts: np.ndarray

    def __len__(self):
        return len(self.indices)

    @property
    def cells(self) -> dict:
        return {
            tuple(int(v) for v in idx): (feat, int(n))
            for idx, feat, n in zip(self.indices, self.features, self.counts)
        }

    @property
    def occupancy(self) -> float:
        return len(self) / self.spec.num_cells


def in_range_mask(xyz: np.ndarray, spec: VoxelGridSpec) -> np.ndarray:
    lo = np.asarray(spec.min)
    hi = np.asarray(spec.max)
    return np.all((xyz >= lo) & (xyz < hi), axis=1)


def crop_range(cloud: PointCloud, spec: VoxelGridSpec) -> PointCloud:
    """Keep points with ``min <= coord < max`` on every axis, in order."""
    return cloud.with_points(cloud.points[in_range_mask(cloud.xyz, spec)])


def voxel_indices(xyz: np.ndarray, spec: VoxelGridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Integer voxel index of each point and a mask of points that land in the grid."""
    idx = np.floor((xyz - np.asarray(spec.min)) / np.asarray(spec.voxel_size)).astype(np.int64)
    dims = np.asarray(spec.dims)
    valid = in_range_mask(xyz, spec) & np.all((idx >= 0) & (idx < dims), axis=1)
    return idx, valid


def voxelize(cloud: PointCloud, spec: VoxelGridSpec) -> VoxelGrid:
    """Average point features per occupied voxel.

    Points inside each cell are put into a canonical order before summing,
    so the result is bitwise independent of the input point order.
    """
    points = cloud.points
    idx, valid = voxel_indices(points[:, :3], spec)
    points, idx = points[valid], idx[valid]
    width = points.shape[1]
    if len(points) == 0:
        return VoxelGrid(spec, np.zeros((0, 3), np.int64), np.zeros((0, width)), np.zeros(0, np.int64))

    _, ny, nz = spec.dims
    linear = (idx[:, 0] * ny + idx[:, 1]) * nz + idx[:, 2]
    # np.lexsort treats the last key as primary
    order = np.lexsort(tuple(points[:, c] for c in reversed(range(width))) + (linear,))
    linear, points = linear[order], points[order]

    starts = np.flatnonzero(np.r_[True, linear[1:] != linear[:-1]])
    counts = np.diff(np.r_[starts, len(linear)])
    sums = np.add.reduceat(points, starts, axis=0)
    means = sums / counts[:, None]

    cell_linear = linear[starts]
    cell_idx = np.stack([cell_linear // (ny * nz), (cell_linear // nz) % ny, cell_linear % nz], axis=1)
    return VoxelGrid(spec, cell_idx, means, counts)


def fuse_frames(
    current: PointCloud,
    previous: Sequence[tuple[PointCloud, RigidTransform]],
    add_time_channel: bool = False,
) -> PointCloud:
    """Concatenate older sweeps, mapped into the current frame, after ``current``.

    With ``add_time_channel`` a final channel holds the frame lag: 0 for the
    current sweep and ``k`` for the ``k``-th entry of ``previous``.
    """
    parts = []
    for lag, cloud in enumerate([current] + [c for c, _ in previous]):
        if cloud.feature_dim != current.feature_dim:
            raise ValueError(
                f"feature_dim mismatch: current has {current.feature_dim}, "
                f"previous frame {lag} has {cloud.feature_dim}"
            )
        pts = cloud.points.copy()
        if lag > 0:
            pts[:, :3] = previous[lag - 1][1].apply(pts[:, :3])
        if add_time_channel:
            pts = np.hstack([pts, np.full((len(pts), 1), float(lag))])
        parts.append(pts)
    dim = current.feature_dim + (1 if add_time_channel else 0)
    return PointCloud(np.vstack(parts), dim, current.frame_id, current.pose)


def read_pcf(path_or_bytes) -> PointCloud:
    """Parse a PCF1 file (or raw bytes)."""
    if isinstance(path_or_bytes, (bytes, bytearray, memoryview)):
        data = bytes(path_or_bytes)
        frame_id = ""
    else:
        with open(path_or_bytes, "rb") as fh:
            data = fh.read()
        frame_id = str(path_or_bytes).rsplit("/", 1)[-1].rsplit(".", 1)[0]
    if len(data) < 4:
        raise PointCloudFormatError("file too short for magic", len(data))
    if data[:4] != PCF_MAGIC:
        raise PointCloudFormatError(f"bad magic {data[:4]!r}", 0)
    if len(data) < _HEADER.size:
        raise PointCloudFormatError("truncated header", len(data))
    _, count, channels = _HEADER.unpack_from(data, 0)
    if channels < 3:
        raise PointCloudFormatError(f"channels_per_point must be >= 3, got {channels}", 8)
    expected = _HEADER.size + 4 * count * channels
    if len(data) < expected:
        raise PointCloudFormatError(
            f"truncated payload: expected {expected} bytes, got {len(data)}", len(data)
        )
    if len(data) > expected:
        raise PointCloudFormatError("trailing bytes after payload", expected)
    values = np.frombuffer(data, dtype="<f4", count=count * channels, offset=_HEADER.size)
    values = values.reshape(count, channels).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(values).ravel())
    if len(bad):
        raise PointCloudFormatError("non-finite value", _HEADER.size + 4 * int(bad[0]))
    return PointCloud(values, channels - 3, frame_id)


def pcf_bytes(cloud: PointCloud) -> bytes:
    header = _HEADER.pack(PCF_MAGIC, len(cloud), cloud.channels)
    return header + np.ascontiguousarray(cloud.points, dtype="<f4").tobytes()


def write_pcf(path, cloud: PointCloud) -> None:
    with open(path, "wb") as fh:
        fh.write(pcf_bytes(cloud))


class Voxelizer(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`voxelize`.

    ``transform`` accepts a :class:`PointCloud` or a raw ``(N, 3+C)`` array.

    Examples
    --------
    >>> vox = Voxelizer().fit()
    >>> vox.grid_dims_
    (1504, 1504, 40)
    """

    def __init__(self, point_range=(-75.2, -75.2, -2.0, 75.2, 75.2, 4.0), voxel_size=(0.1, 0.1, 0.15)):
        self.point_range = point_range
        self.voxel_size = voxel_size

    def fit(self, X=None, y=None):
        lo, hi = tuple(self.point_range[:3]), tuple(self.point_range[3:])
        self.spec_ = VoxelGridSpec(lo, hi, tuple(self.voxel_size))
        self.grid_dims_ = self.spec_.dims
        return self

    def transform(self, X) -> VoxelGrid:
        check_is_fitted(self, "spec_")
        cloud = X if isinstance(X, PointCloud) else PointCloud(check_points(X))
        return voxelize(cloud, self.spec_)
