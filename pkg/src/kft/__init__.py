"""Knowledge-fusion transformer video action classifier, built from scratch
on a small numpy autodiff engine."""

from .tensor import Tensor, ShapeError, softmax, log_softmax, concat, finite_diff_check
from .model import KftModel, ModelConfig, shape_schedule, build_plan
from .attention import KftBlock, KftBlockSpec, MultiHeadAttention, scaled_dot_attention
from .train import TrainConfig, SgdMomentum, train_loop, evaluate

__all__ = [
    "Tensor", "ShapeError", "softmax", "log_softmax", "concat", "finite_diff_check",
    "KftModel", "ModelConfig", "shape_schedule", "build_plan",
    "KftBlock", "KftBlockSpec", "MultiHeadAttention", "scaled_dot_attention",
    "TrainConfig", "SgdMomentum", "train_loop", "evaluate",
]

__version__ = "0.1.0"
