"""Inner-imaging channel attention on a small numpy autograd engine.

The public surface re-exports the pieces most callers need; submodules hold the rest.
"""

from .backbones import ArchDescriptor, Network, build
from .block import InnerImageConfig, InnerImaging, SqueezeExcitation
from .config import ExperimentConfig, load_config, parse_config
from .gfilters import ConfigError, GFilterSet, GFilterSpec, preset
from .residual import JointInnerImaging, PreActBlock
from .spatial import SpatialAttention
from .tensor import NonFiniteError, ShapeError, TapeError, Tensor, no_grad
from .training import SGD, TrainConfig, Trainer, TrainingAborted, evaluate, lr_at

__version__ = "0.1.0"

__all__ = [
    "ArchDescriptor", "Network", "build",
    "InnerImageConfig", "InnerImaging", "SqueezeExcitation",
    "ExperimentConfig", "load_config", "parse_config",
    "ConfigError", "GFilterSet", "GFilterSpec", "preset",
    "JointInnerImaging", "PreActBlock", "SpatialAttention",
    "NonFiniteError", "ShapeError", "TapeError", "Tensor", "no_grad",
    "SGD", "TrainConfig", "Trainer", "TrainingAborted", "evaluate", "lr_at",
]
