"""Camera-based semantic scene completion with dynamic/static depth branches and adaptive fusion."""
from .config import ABLATION_ROWS, AblationFlags, ConfigError, ModelConfig
from .model import SSCModel, ViewBatch, build_model, parameter_count, upsample_and_project
from .scene import SemanticClassSet, VoxelGridSpec, generate_scene, load_grid, save_grid

__version__ = "0.1.0"

__all__ = [
    "ABLATION_ROWS",
    "AblationFlags",
    "ConfigError",
    "ModelConfig",
    "SSCModel",
    "SemanticClassSet",
    "ViewBatch",
    "VoxelGridSpec",
    "build_model",
    "generate_scene",
    "load_grid",
    "parameter_count",
    "save_grid",
    "upsample_and_project",
]
