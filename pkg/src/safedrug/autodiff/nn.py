"""Layers built from the primitives in :mod:`safedrug.autodiff.tensor`."""

from safedrug.autodiff.tensor import Tensor, add, matmul, mul, sigmoid, sub, tanh
from safedrug.errors import InvalidRate, ShapeMismatch

GRU_PARAMS = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def gru_cell(x, h_prev, params):
    """One GRU step.

    ``params`` maps the names in ``GRU_PARAMS`` to tensors; input weights are
    ``in x hidden``, recurrent weights ``hidden x hidden``::

        z  = sigmoid(x W_z + h U_z + b_z)
        r  = sigmoid(x W_r + h U_r + b_r)
        h~ = tanh(x W_h + (r * h) U_h + b_h)
        h' = (1 - z) * h + z * h~
    """
    hidden = params["U_z"].shape[0]
    if h_prev.shape != (hidden,) or x.shape != (params["W_z"].shape[0],):
        raise ShapeMismatch(f"gru_cell: x {x.shape}, h {h_prev.shape}, hidden size {hidden}")
    z = sigmoid(matmul(x, params["W_z"]) + matmul(h_prev, params["U_z"]) + params["b_z"])
    r = sigmoid(matmul(x, params["W_r"]) + matmul(h_prev, params["U_r"]) + params["b_r"])
    candidate = tanh(matmul(x, params["W_h"]) + matmul(mul(r, h_prev), params["U_h"]) + params["b_h"])
    return add(mul(sub(1.0, z), h_prev), mul(z, candidate))


def dropout(x, rate, training, rng):
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise InvalidRate(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return mul(x, Tensor(keep / (1.0 - rate)))


def gru_shapes(input_size, hidden):
    shapes = {}
    for gate in "zrh":
        shapes[f"W_{gate}"] = (input_size, hidden)
        shapes[f"U_{gate}"] = (hidden, hidden)
        shapes[f"b_{gate}"] = (hidden,)
    return shapes

