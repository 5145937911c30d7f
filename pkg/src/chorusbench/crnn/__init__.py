"""Frame-wise CRNN detector: network, training loop, and checkpoints."""

from .checkpoint import load_checkpoint, save_checkpoint
from .network import (
    CrnnConfig,
    CrnnParams,
    backward_batch,
    bce_loss,
    bce_loss_grad,
    binarize,
    conv_stack_forward,
    forward,
    forward_batch,
    init_params,
    tensor_shapes,
)
from .training import (
    AdamOptimizer,
    LossHistory,
    TrainConfig,
    prepare_training_arrays,
    train,
    train_on_arrays,
)

__all__ = [
    "AdamOptimizer",
    "CrnnConfig",
    "CrnnParams",
    "LossHistory",
    "TrainConfig",
    "backward_batch",
    "bce_loss",
    "bce_loss_grad",
    "binarize",
    "conv_stack_forward",
    "forward",
    "forward_batch",
    "init_params",
    "load_checkpoint",
    "prepare_training_arrays",
    "save_checkpoint",
    "tensor_shapes",
    "train",
    "train_on_arrays",
]
