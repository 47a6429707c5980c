"""Pipeline configuration and run manifests for the command-line tools."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Optional

from . import __version__
from .augment import DEFAULT_TTA_SCALES, DEFAULT_TTA_YAWS, DEFAULT_TTA_Z_OFFSETS


class ConfigError(ValueError):
    pass


@dataclass
class VoxelSection:
    min: list = field(default_factory=lambda: [-75.2, -75.2, -2.0])
    max: list = field(default_factory=lambda: [75.2, 75.2, 4.0])
    voxel_size: list = field(default_factory=lambda: [0.1, 0.1, 0.15])


@dataclass
class TtaSection:
    yaws: list = field(default_factory=lambda: list(DEFAULT_TTA_YAWS))
    scales: list = field(default_factory=lambda: list(DEFAULT_TTA_SCALES))
    z_offsets: list = field(default_factory=lambda: list(DEFAULT_TTA_Z_OFFSETS))


@dataclass
class AssignSection:
    iou_type: str = "3d"
    top_m: int = 512
    score_threshold: float = 0.1
    num_classes: int = 3


@dataclass
class FusionSection:
    nms_iou_threshold: float = 0.5
    iou_match_threshold: float = 0.55
    max_boxes: int = 500
    iou_type: str = "bev"
    yaw_mode: str = "full"
    ensemble: Optional[dict] = None


@dataclass
class EvalSection:
    iou_thresholds: dict = field(default_factory=lambda: {"0": 0.7})
    default_iou_threshold: float = 0.5
    iou_type: str = "3d"


@dataclass
class GtPasteSection:
    per_class_counts: dict = field(default_factory=dict)
    total_epochs: int = 20
    fade_last: int = 5
    placement: str = "original"
    resample_range: Optional[list] = None


@dataclass
class PipelineConfig:
    voxel: VoxelSection = field(default_factory=VoxelSection)
    tta: TtaSection = field(default_factory=TtaSection)
    assign: AssignSection = field(default_factory=AssignSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    eval: EvalSection = field(default_factory=EvalSection)
    gtpaste: GtPasteSection = field(default_factory=GtPasteSection)
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        if "manifest_version" in doc and "config" in doc:
            doc = doc["config"]
        config = _build(cls, doc, "")
        config.validate()
        return config

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return sha256_text(canonical_json(self.to_dict()))

    def override(self, dotted: str, value: Any) -> "PipelineConfig":
        """Return a copy with one dotted key replaced (``fusion.max_boxes``)."""
        doc = self.to_dict()
        *parents, leaf = dotted.split(".")
        node = doc
        path = ""
        for part in parents:
            path = f"{path}.{part}" if path else part
            if not isinstance(node, dict) or part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key: {path!r}")
            node = node[part]
        if leaf not in node:
            raise ConfigError(f"unknown config key: {dotted!r}")
        node[leaf] = value
        return PipelineConfig.from_dict(doc)

    def validate(self) -> None:
        from .pointcloud import VoxelGridSpec
        from .fusion import EnsembleConfig

        try:
            VoxelGridSpec(tuple(self.voxel.min), tuple(self.voxel.max), tuple(self.voxel.voxel_size))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"voxel: {exc}") from None
        for name in ("yaws", "scales", "z_offsets"):
            values = getattr(self.tta, name)
            if not values or not all(_is_number(v) for v in values):
                raise ConfigError(f"tta.{name} must be a non-empty list of numbers")
        if any(v <= 0 for v in self.tta.scales):
            raise ConfigError("tta.scales must be positive")
        for section, key in (("assign", "iou_type"), ("fusion", "iou_type"), ("eval", "iou_type")):
            if getattr(getattr(self, section), key) not in ("bev", "3d"):
                raise ConfigError(f"{section}.{key} must be 'bev' or '3d'")
        if self.fusion.yaw_mode not in ("full", "half"):
            raise ConfigError("fusion.yaw_mode must be 'full' or 'half'")
        for key in ("nms_iou_threshold", "iou_match_threshold"):
            value = getattr(self.fusion, key)
            if not _is_number(value) or not 0 <= value <= 1:
                raise ConfigError(f"fusion.{key} must lie in [0, 1]")
        if not isinstance(self.fusion.max_boxes, int) or self.fusion.max_boxes < 1:
            raise ConfigError("fusion.max_boxes must be a positive integer")
        if not isinstance(self.assign.top_m, int) or self.assign.top_m < 1:
            raise ConfigError("assign.top_m must be a positive integer")
        if self.fusion.ensemble is not None:
            try:
                EnsembleConfig.from_dict(self.fusion.ensemble)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"fusion.ensemble: {exc}") from None
        for key, value in self.eval.iou_thresholds.items():
            if not str(key).lstrip("-").isdigit() or not _is_number(value) or not 0 <= value <= 1:
                raise ConfigError(f"eval.iou_thresholds[{key!r}] must map a class id to [0, 1]")
        if not 0 <= self.gtpaste.fade_last <= self.gtpaste.total_epochs:
            raise ConfigError("gtpaste: need 0 <= fade_last <= total_epochs")
        if self.gtpaste.placement not in ("original", "resample"):
            raise ConfigError("gtpaste.placement must be 'original' or 'resample'")
        for key, value in self.gtpaste.per_class_counts.items():
            if not str(key).isdigit() or not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ConfigError(f"gtpaste.per_class_counts[{key!r}] must map a class id to a count >= 0")
        rr = self.gtpaste.resample_range
        if rr is not None and (len(rr) != 4 or not all(_is_number(v) for v in rr) or rr[0] >= rr[2] or rr[1] >= rr[3]):
            raise ConfigError("gtpaste.resample_range must be [xmin, ymin, xmax, ymax]")
        if self.gtpaste.placement == "resample" and rr is None:
            raise ConfigError("gtpaste.placement 'resample' needs gtpaste.resample_range")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @property
    def eval_thresholds(self) -> dict[int, float]:
        return {int(k): float(v) for k, v in self.eval.iou_thresholds.items()}


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def _build(cls, doc, prefix: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{prefix or 'config'} must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in doc.items():
        dotted = f"{prefix}.{key}" if prefix else key
        if key not in fields:
            raise ConfigError(f"unknown config key: {dotted!r}")
        default = fields[key].default_factory() if fields[key].default_factory is not dataclasses.MISSING else fields[key].default
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, dotted)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    """Provenance for one command invocation."""

    command: str
    config: dict
    seed: int
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    tool_version: str = __version__
    started_at: str = ""
    wall_clock_seconds: float = 0.0
    _t0: float = field(default=0.0, repr=False)

    def __post_init__(self):
        self.started_at = datetime.now(timezone.utc).isoformat()
        self._t0 = time.perf_counter()

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def add_output(self, path) -> None:
        self.outputs[str(path)] = sha256_file(path)

    def to_dict(self) -> dict:
        return {
            "manifest_version": 1,
            "tool_version": self.tool_version,
            "command": self.command,
            "config": self.config,
            "config_digest": sha256_text(canonical_json(self.config)),
            "seed": self.seed,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "started_at": self.started_at,
            "wall_clock_seconds": round(time.perf_counter() - self._t0, 6),
        }

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
