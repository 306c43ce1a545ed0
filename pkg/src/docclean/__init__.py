"""Light-weight encoder-decoder networks for document image cleanup.

Submodules: ``nn`` (primitives), ``model`` (M16/M32/M64 builders and
checkpoints), ``perceptual`` (composite loss), ``data`` (patches and
augmentation), ``train``, ``tiler`` (full-image inference), ``metrics``
and ``cli``.
"""
from .errors import (
    CheckpointError,
    ConfigurationError,
    DatasetError,
    DocCleanError,
    TrainingDiverged,
)
from .kernels import BACKEND
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "CheckpointError",
    "ConfigurationError",
    "DatasetError",
    "DocCleanError",
    "ModelConfig",
    "TrainingDiverged",
    "build_model",
    "load_checkpoint",
    "save_checkpoint",
]
