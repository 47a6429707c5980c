"""Scored detections, annotated objects, and their JSON Lines interchange."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional

from .geom import Box3D


class SchemaError(ValueError):
    """A JSON Lines record does not match the expected schema."""

    def __init__(self, message: str, path=None, line: Optional[int] = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


@dataclass(frozen=True)
class GroundTruthObject:
    box: Box3D
    class_id: int
    frame_id: str = ""


@dataclass(frozen=True)
class Detection:
    box: Box3D
    class_id: int
    score: float
    model_id: Optional[str] = None
    frame_id: str = ""

    def __post_init__(self):
        score = float(self.score)
        if not (0.0 <= score <= 1.0) or math.isnan(score):
            raise ValueError(f"detection score must lie in [0, 1], got {score!r}")
        object.__setattr__(self, "score", score)
        object.__setattr__(self, "class_id", int(self.class_id))

    def with_score(self, score: float) -> "Detection":
        return replace(self, score=score)


def _parse_box(value, path, line) -> Box3D:
    if not isinstance(value, list) or len(value) != 7:
        raise SchemaError('"box" must be a list of 7 numbers', path, line)
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise SchemaError('"box" entries must be numbers', path, line)
    try:
        return Box3D.from_array(value)
    except ValueError as exc:
        raise SchemaError(str(exc), path, line) from None


def _require(record: dict, key: str, types, path, line):
    if key not in record:
        raise SchemaError(f'missing field "{key}"', path, line)
    value = record[key]
    if not isinstance(value, types) or isinstance(value, bool):
        raise SchemaError(f'field "{key}" has the wrong type', path, line)
    return value


def _iter_records(path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON ({exc.msg})", path, lineno) from None
            if not isinstance(record, dict):
                raise SchemaError("each line must be a JSON object", path, lineno)
            yield lineno, record


def detection_from_record(record: dict, path=None, line=None) -> Detection:
    frame_id = str(_require(record, "frame_id", (str, int), path, line))
    class_id = _require(record, "class_id", int, path, line)
    score = _require(record, "score", (int, float), path, line)
    if not 0.0 <= score <= 1.0:
        raise SchemaError('"score" must lie in [0, 1]', path, line)
    model_id = record.get("model_id")
    if model_id is not None and not isinstance(model_id, str):
        raise SchemaError('"model_id" must be a string', path, line)
    box = _parse_box(record.get("box"), path, line)
    return Detection(box, class_id, float(score), model_id, frame_id)


def ground_truth_from_record(record: dict, path=None, line=None) -> GroundTruthObject:
    frame_id = str(_require(record, "frame_id", (str, int), path, line))
    class_id = _require(record, "class_id", int, path, line)
    return GroundTruthObject(_parse_box(record.get("box"), path, line), class_id, frame_id)


def read_detections(path) -> list[Detection]:
    return [detection_from_record(rec, path, n) for n, rec in _iter_records(path)]


def read_ground_truth(path) -> list[GroundTruthObject]:
    return [ground_truth_from_record(rec, path, n) for n, rec in _iter_records(path)]


def read_records(path) -> list[tuple[int, dict]]:
    return list(_iter_records(path))


def detection_to_record(det: Detection) -> dict:
    record = {
        "frame_id": det.frame_id,
        "class_id": det.class_id,
        "score": det.score,
        "box": det.box.to_list(),
    }
    if det.model_id is not None:
        record["model_id"] = det.model_id
    return record


def ground_truth_to_record(obj: GroundTruthObject) -> dict:
    return {"frame_id": obj.frame_id, "class_id": obj.class_id, "box": obj.box.to_list()}


def dumps_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(dumps_line(record))
            fh.write("\n")


def write_detections(path, dets: Iterable[Detection]) -> None:
    write_jsonl(path, (detection_to_record(d) for d in dets))


def write_ground_truth(path, objects: Iterable[GroundTruthObject]) -> None:
    write_jsonl(path, (ground_truth_to_record(o) for o in objects))


def group_by_frame(items: Iterable) -> dict[str, list]:
    """Group detections or objects by ``frame_id`` preserving input order."""
    groups: dict[str, list] = {}
    for item in items:
        groups.setdefault(item.frame_id, []).append(item)
    return groups


def group_by_class(items: Iterable) -> dict[int, list]:
    groups: dict[int, list] = {}
    for item in items:
        groups.setdefault(item.class_id, []).append(item)
    return dict(sorted(groups.items()))
