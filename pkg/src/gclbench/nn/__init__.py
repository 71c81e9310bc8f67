from .layers import (
    MLP,
    Activation,
    BatchNorm,
    EncoderSpec,
    GCNEncoder,
    GINEncoder,
    Linear,
    Module,
    ReadoutSpec,
    gcn_layer,
    gin_layer,
    make_encoder,
    readout,
)
from .optim import Adam, AdamState, adam_step, ema_update, load_checkpoint, save_checkpoint
from .tensor import ShapeError, Tensor, backward, parameter

__all__ = [
    "MLP", "Activation", "BatchNorm", "EncoderSpec", "GCNEncoder", "GINEncoder", "Linear",
    "Module", "ReadoutSpec", "gcn_layer", "gin_layer", "make_encoder", "readout",
    "Adam", "AdamState", "adam_step", "ema_update", "load_checkpoint", "save_checkpoint",
    "ShapeError", "Tensor", "backward", "parameter",
]
