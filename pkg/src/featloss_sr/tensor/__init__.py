"""Minimal dense-tensor engine: conv, ReLU, 2x2 max pooling, pixel shuffle and Adam."""
from .backend import BACKEND, compute_mode, get_mode, has_extension, set_mode
from .ops import (
    conv2d,
    conv2d_backward,
    maxpool2x2,
    maxpool2x2_backward,
    pixel_shuffle,
    pixel_shuffle_backward,
    pixel_unshuffle,
    relu,
    relu_backward,
    upsample_nearest,
    upsample_nearest_backward,
)
from .optim import AdamState, ParamGroup, adam_step

__all__ = [
    "BACKEND", "compute_mode", "get_mode", "has_extension", "set_mode",
    "conv2d", "conv2d_backward", "maxpool2x2", "maxpool2x2_backward",
    "pixel_shuffle", "pixel_shuffle_backward", "pixel_unshuffle",
    "relu", "relu_backward", "upsample_nearest", "upsample_nearest_backward",
    "AdamState", "ParamGroup", "adam_step",
]
