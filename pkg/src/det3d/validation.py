"""Input coercion helpers shared by the estimators."""

from __future__ import annotations

import numbers

import numpy as np

from .geom import Box3D


def check_points(points, min_columns: int = 3) -> np.ndarray:
    """Return ``points`` as a finite 2D float64 array with >= ``min_columns`` columns."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, min_columns)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2D point array, got shape {arr.shape}")
    if arr.shape[1] < min_columns:
        raise ValueError(f"expected at least {min_columns} columns, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point array contains non-finite values")
    return arr


def check_boxes(boxes) -> list[Box3D]:
    """Accept a sequence of :class:`Box3D` or an ``(N, 7)`` array."""
    if isinstance(boxes, np.ndarray):
        if boxes.ndim != 2 or boxes.shape[1] != 7:
            raise ValueError(f"expected an (N, 7) box array, got shape {boxes.shape}")
        return [Box3D.from_array(row) for row in boxes]
    out = []
    for box in boxes:
        out.append(box if isinstance(box, Box3D) else Box3D.from_array(box))
    return out


def check_unit_interval(value, name: str) -> float:
    if not isinstance(value, numbers.Real) or not 0.0 <= float(value) <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value!r}")
    return float(value)


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def boxes_to_array(boxes) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 7))
    return np.array([b.to_list() for b in boxes])
