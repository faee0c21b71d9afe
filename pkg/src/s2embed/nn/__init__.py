"""Dense tensors with reverse-mode autodiff and the training utilities built on them."""
from .tensor import Tensor
from .functional import (concat_cols, dropout, embedding_rows, gather_rows,
                         gelu, layer_norm, linear, multihead_attention,
                         scatter_rows_with_fill, softmax)
from .optim import AdamW, CosineSchedule, clip_global_norm
from .gradcheck import grad_check
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Tensor", "linear", "gelu", "softmax", "layer_norm", "dropout",
    "multihead_attention", "gather_rows", "scatter_rows_with_fill",
    "embedding_rows", "concat_cols", "AdamW", "CosineSchedule",
    "clip_global_norm", "grad_check", "save_checkpoint", "load_checkpoint",
]
