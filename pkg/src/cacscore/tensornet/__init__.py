"""A small NumPy ConvNet engine: layers, network, Adam, gradient checks and checkpoints."""

from .checkpoint import CheckpointError, ModelCheckpoint
from .gradcheck import finite_diff_check
from .layers import NonFiniteError
from .network import ConvNet, LayerConfig
from .optim import AdamState, adam_update

__all__ = [
    "AdamState",
    "CheckpointError",
    "ConvNet",
    "LayerConfig",
    "ModelCheckpoint",
    "NonFiniteError",
    "adam_update",
    "finite_diff_check",
]
