from . import tensor as ops
from .gradcheck import grad_check
from .nn import Embedding, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, Parameter
from .optim import AdamW, MissingGradError, WarmupDecay
from .rng import Rng
from .tensor import MASK_FILL, ShapeError, Tensor, deterministic, is_deterministic, no_grad, set_deterministic

__all__ = [
    "ops", "grad_check", "Embedding", "FeedForward", "LayerNorm", "Linear", "Module",
    "MultiHeadAttention", "Parameter", "AdamW", "MissingGradError", "WarmupDecay", "Rng",
    "MASK_FILL", "ShapeError", "Tensor", "deterministic", "is_deterministic", "no_grad", "set_deterministic",
]
