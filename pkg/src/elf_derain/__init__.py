"""elf-derain: two-stage hybrid Transformer/CNN rain streak removal.

A from-scratch NCHW autograd engine (numba-accelerated kernels with a
pure-numpy fallback) drives a dual-path deraining model: rain prediction on a
sub-sampled grid, attention-based background texture recovery, and a
super-resolving reconstruction stage trained under a joint Charbonnier+SSIM
objective.
"""

from .tensor import EngineError, Tensor, precision, record, set_default_dtype
from .model import DerainModel, DerainOutputs, ModelConfig, loss_joint, variant_config

__all__ = [
    "DerainModel",
    "DerainOutputs",
    "EngineError",
    "ModelConfig",
    "Tensor",
    "loss_joint",
    "precision",
    "record",
    "set_default_dtype",
    "variant_config",
]

__version__ = "0.1.0"
