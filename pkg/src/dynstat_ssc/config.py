"""Model/training configuration with a versioned, strict JSON representation."""
from __future__ import annotations

import dataclasses
import enum
import json
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Tuple

from .depth import DepthBins
from .dsaf import AttentionConfig, FusionStrategy
from .losses import LossWeights
from .scene import CameraRig, SemanticClassSet, VoxelGridSpec, default_rig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AblationFlags:
    use_lmms: bool = True
    use_dynamic: bool = True
    use_static: bool = True
    use_dsaf: bool = True

    def __post_init__(self):
        if not (self.use_dynamic or self.use_static):
            raise ConfigError("at least one of the dynamic/static branches must be enabled")


# Rows of the architecture ablation: (lmms, dynamic, static, dsaf).
ABLATION_ROWS = {
    "baseline": AblationFlags(False, True, False, False),
    "a": AblationFlags(True, True, False, False),
    "b": AblationFlags(True, False, True, False),
    "c": AblationFlags(True, True, True, False),
    "d": AblationFlags(False, True, True, True),
    "e": AblationFlags(True, True, True, True),
}


@dataclass(frozen=True)
class DepthConfig:
    d_min: float = 1.0
    d_max: float = 12.8
    D: int = 16

    def bins(self) -> DepthBins:
        return DepthBins(self.d_min, self.d_max, self.D)


@dataclass(frozen=True)
class CameraConfig:
    width: int = 128
    height: int = 64
    focal: float = 64.0
    baseline: float = 0.6
    camera_height: float = 2.4
    pitch_deg: float = 12.0
    ego_step: float = 0.8


@dataclass(frozen=True)
class TrainConfig:
    dataset_seed: int = 0
    n_scenes: int = 4
    n_boxes: int = 6
    lr: float = 1e-4
    weight_decay: float = 0.01
    milestones: Tuple[float, ...] = (0.6, 0.85)
    gamma: float = 0.1
    grad_clip: float = 0.0


@dataclass(frozen=True)
class ModelConfig:
    grid: VoxelGridSpec = VoxelGridSpec()
    class_names: Tuple[str, ...] = SemanticClassSet().names
    dynamic_classes: Tuple[str, ...] = SemanticClassSet().dynamic
    depth: DepthConfig = DepthConfig()
    camera: CameraConfig = CameraConfig()
    image_channels: int = 32
    context_channels: int = 32
    text_width: int = 16
    text_seed: int = 0
    fusion_heads: int = 4
    attention: AttentionConfig = AttentionConfig()
    fusion: FusionStrategy = FusionStrategy.DSAF
    aspp_rates: Tuple[int, ...] = (1, 2, 3)
    n_frames: int = 3
    share_mie: bool = False
    loss_weights: LossWeights = LossWeights()
    ablation: AblationFlags = AblationFlags()
    train: TrainConfig = TrainConfig()
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.n_frames <= 5:
            raise ConfigError(f"n_frames must be in [2, 5], got {self.n_frames}")
        if self.context_channels % self.attention.heads:
            raise ConfigError("attention heads must divide context_channels")
        if any(d % 2 for d in self.grid.dims):
            raise ConfigError("grid dims must be even (half-resolution working volume)")

    @property
    def class_set(self) -> SemanticClassSet:
        return SemanticClassSet(self.class_names, self.dynamic_classes)

    @property
    def bins(self) -> DepthBins:
        return self.depth.bins()

    @property
    def working_grid(self) -> VoxelGridSpec:
        return self.grid.scaled(2)

    @property
    def effective_fusion(self) -> FusionStrategy:
        """Strategy actually built: rows without DSAF fall back to channel concatenation."""
        return FusionStrategy(self.fusion) if self.ablation.use_dsaf else FusionStrategy.CAT_CONV

    def rig(self) -> CameraRig:
        c = self.camera
        return default_rig(self.n_frames, c.width, c.height, c.focal, c.baseline,
                           c.camera_height, c.pitch_deg, c.ego_step)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    # serialisation -----------------------------------------------------
    def to_dict(self) -> Dict[str, Any]:
        return {"schema_version": SCHEMA_VERSION, **_to_plain(self)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        data = dict(data)
        version = data.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version!r}")
        try:
            return _from_plain(cls, data, "config")
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "ModelConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config root must be an object")
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.loads(Path(path).read_text())


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    return obj


def _from_plain(tp, value, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        hints = typing.get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp) if f.init}
        unknown = set(value) - names
        if unknown:
            raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
        kwargs = {k: _from_plain(hints[k], v, f"{where}.{k}") for k, v in value.items()}
        return tp(**kwargs)
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        try:
            return tp(value)
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_from_plain(args[0], v, where) for v in value)
        if len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} items")
        return tuple(_from_plain(a, v, where) for a, v in zip(args, value))
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return None if value is None else _from_plain(args[0], value, where)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is int or tp is bool or tp is str:
        if type(value) is not tp:
            raise ConfigError(f"{where}: expected {tp.__name__}")
        return value
    return value
