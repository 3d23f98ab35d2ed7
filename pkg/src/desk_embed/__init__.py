"""A small, fully inspectable text-embedding training stack on numpy."""

from .autodiff import Tensor, no_grad
from .encoder import Encoder, EncoderConfig, TaskKind, TokenBatch
from .rope import PolicyKind, RopeParams, RopePolicy

__version__ = "0.1.0"

__all__ = [
    "Tensor", "no_grad", "Encoder", "EncoderConfig", "TaskKind", "TokenBatch",
    "PolicyKind", "RopeParams", "RopePolicy",
]
