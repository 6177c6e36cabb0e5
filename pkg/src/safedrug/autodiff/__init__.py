"""Minimal reverse-mode differentiation core plus the Adam optimizer."""

from safedrug.autodiff.nn import dropout, gru_cell, gru_shapes, linear
from safedrug.autodiff.optim import AdamState, adam_step
from safedrug.autodiff.rng import Streams
from safedrug.autodiff.tensor import (
    Tensor,
    add,
    as_tensor,
    checked,
    clip,
    concat,
    elementwise_mul,
    embedding_lookup,
    layer_norm,
    log,
    masked_linear,
    matmul,
    mean,
    mean_pool,
    mul,
    relu,
    segment_mean,
    segment_sum,
    sigmoid,
    sub,
    take,
    tanh,
    total,
)

__all__ = [
    "AdamState",
    "Streams",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "checked",
    "clip",
    "concat",
    "dropout",
    "elementwise_mul",
    "embedding_lookup",
    "gru_cell",
    "gru_shapes",
    "layer_norm",
    "linear",
    "log",
    "masked_linear",
    "matmul",
    "mean",
    "mean_pool",
    "mul",
    "relu",
    "segment_mean",
    "segment_sum",
    "sigmoid",
    "sub",
    "take",
    "tanh",
    "total",
]
