from .tensor import (
    Tensor, ShapeError, tensor, zeros, ones, backward, zero_grad,
    add, sub, mul, div, matmul, transpose, reshape, concat,
    slice_, gather, embedding_lookup, softmax, log_softmax,
    layer_norm, relu, gelu, softplus, pow_, sum_, mean_over_set,
    max_over_set, l1_norm, l2_normalize, cross_entropy_with_logits,
)
from .optim import adamw_step, AdamW, clip_grad_global_norm, cosine_lr
