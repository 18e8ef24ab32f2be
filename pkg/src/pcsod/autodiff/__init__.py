"""Small reverse-mode autodiff engine sized for the segmentation network."""
from .checkpoint import Checkpoint, CheckpointError, read_checkpoint, write_checkpoint
from .nn import (
    REDUCTIONS,
    AttentiveScores,
    BatchNorm,
    MlpSpec,
    Module,
    SharedMLP,
    normalization_disabled,
    reduce,
    reduced_width,
    shared_mlp_forward,
)
from .optim import Adam, AdamState, adam_step
from .tensor import (
    Tensor,
    add,
    as_tensor,
    batch_norm,
    concat,
    cross_entropy,
    exp,
    expand,
    gather,
    is_grad_enabled,
    linear,
    log,
    max_,
    mean,
    mul,
    no_grad,
    record_branches,
    relu,
    reshape,
    softmax,
    sub,
    sum_,
)

__all__ = [
    "Adam", "AdamState", "AttentiveScores", "BatchNorm", "Checkpoint", "CheckpointError",
    "MlpSpec", "Module", "REDUCTIONS", "SharedMLP", "Tensor", "adam_step", "add", "as_tensor",
    "batch_norm", "concat", "cross_entropy", "exp", "expand", "gather", "is_grad_enabled",
    "linear", "log", "max_", "mean", "mul", "no_grad", "normalization_disabled", "read_checkpoint", "record_branches", "reduce",
    "reduced_width", "relu", "reshape", "shared_mlp_forward", "softmax", "sub", "sum_",
    "write_checkpoint",
]
