"""Desk-scale masked video modeling with sparse convolutional networks."""

from .config import RunConfig, default_config, parse_config, render_config
from .masking import MaskGrid, MaskView, sample_mask, view_at
from .model import DecoderConfig, EncoderConfig, decode, encode, encode_dense, init_params
from .objective import LossReport, consistency_loss, online_loss, target_loss, total_loss
from .sparse import SparseActivation
from .tensor import Tensor, no_grad, set_default_dtype
from .trainer import DualParams, FramePair, TrainConfig, Trainer

__all__ = [
    "DecoderConfig",
    "DualParams",
    "EncoderConfig",
    "FramePair",
    "LossReport",
    "MaskGrid",
    "MaskView",
    "RunConfig",
    "SparseActivation",
    "Tensor",
    "TrainConfig",
    "Trainer",
    "consistency_loss",
    "decode",
    "default_config",
    "encode",
    "encode_dense",
    "init_params",
    "no_grad",
    "online_loss",
    "parse_config",
    "render_config",
    "sample_mask",
    "set_default_dtype",
    "target_loss",
    "total_loss",
    "view_at",
]
__version__ = "0.1.0"
