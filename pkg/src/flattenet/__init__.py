"""Flattening-module toolkit: numpy layers with reverse-mode gradients, the
depth-to-space head, complexity counting and a small training lab."""

from .head import ConfigError, FlatteningModule, FlatteningModuleSpec, load_config, shipped_configs
from .layers import ShapeError
from .model import FlatteNet, end_to_end_loss
from .shuffle import RearrangeSpec, channel_shuffle, connectivity_check, pixel_shuffle, pixel_unshuffle, rearrange, rearrange_inv
from .tensor import Param, Tape, TensorError, read_flt1, tensor_new, write_flt1

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "FlatteNet", "FlatteningModule", "FlatteningModuleSpec", "Param", "RearrangeSpec",
    "ShapeError", "Tape", "TensorError", "channel_shuffle", "connectivity_check", "end_to_end_loss",
    "load_config", "pixel_shuffle", "pixel_unshuffle", "read_flt1", "rearrange", "rearrange_inv",
    "shipped_configs", "tensor_new", "write_flt1",
]
