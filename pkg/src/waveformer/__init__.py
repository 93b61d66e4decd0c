"""Convolution-free audio transformer for raw-waveform tagging, on a small numpy autodiff core."""

from .autodiff import Tensor, backward
from .model import AudioTransformer, ModelConfig, build, forward, load_checkpoint, param_count, save_checkpoint

__all__ = [
    "AudioTransformer",
    "ModelConfig",
    "Tensor",
    "backward",
    "build",
    "forward",
    "load_checkpoint",
    "param_count",
    "save_checkpoint",
]

__version__ = "0.1.0"
