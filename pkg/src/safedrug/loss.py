"""Training losses and the proportional DDI controller."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from safedrug.autodiff import Tensor, add, as_tensor, clip, log, matmul, mul, relu, sub, take, total
from safedrug.errors import AsymmetricMatrix, ConfigError, DomainError

EPS = 1e-12


@dataclass
class LossConfig:
    alpha: float = 0.95
    kp: float = 0.05
    gamma: float = 0.06

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.kp <= 0:
            raise ConfigError(f"kp must be positive, got {self.kp}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")

    def to_dict(self):
        return asdict(self)


@dataclass
class LossBreakdown:
    l_bce: float
    l_multi: float
    l_ddi: float
    beta: float
    total: float

    def to_dict(self):
        return asdict(self)


def bce_loss(m, o_hat, tolerant=False):
    """Summed binary cross entropy. ``tolerant`` clamps scores to [1e-12, 1 - 1e-12]."""
    o_hat = as_tensor(o_hat)
    m = np.asarray(m, dtype=np.float64)
    if tolerant:
        o_hat = clip(o_hat, EPS, 1.0 - EPS)
    elif np.any((o_hat.data <= 0.0) | (o_hat.data >= 1.0)):
        raise DomainError("bce_loss needs scores strictly inside (0, 1)")
    pos = mul(log(o_hat), Tensor(m))
    neg = mul(log(sub(1.0, o_hat)), Tensor(1.0 - m))
    return mul(total(add(pos, neg)), -1.0)


def multi_hinge_loss(m, o_hat):
    """Sum over (positive, negative) label pairs of ``max(0, 1 - (o_i - o_j))``, divided by |M|."""
    o_hat = as_tensor(o_hat)
    m = np.asarray(m)
    pos, neg = np.flatnonzero(m == 1), np.flatnonzero(m == 0)
    if len(pos) == 0 or len(neg) == 0:
        return Tensor(0.0)
    i = np.repeat(pos, len(neg))
    j = np.tile(neg, len(pos))
    margin = relu(sub(1.0, sub(take(o_hat, i), take(o_hat, j))))
    return mul(total(margin), 1.0 / len(m))


def check_ddi_matrix(ddi):
    ddi = np.asarray(ddi, dtype=np.float64)
    if ddi.ndim != 2 or ddi.shape[0] != ddi.shape[1] or not np.array_equal(ddi, ddi.T):
        raise AsymmetricMatrix("DDI matrix must be square and symmetric")
    return ddi


def ddi_loss(o_hat, ddi):
    """``sum_ij D_ij o_i o_j`` over the full matrix (each unordered pair counted twice)."""
    ddi = check_ddi_matrix(ddi)
    o_hat = as_tensor(o_hat)
    return total(mul(matmul(o_hat, Tensor(ddi)), o_hat))


def controller_beta(ddi_rate, cfg):
    if ddi_rate <= cfg.gamma:
        return 1.0
    return max(0.0, 1.0 - (ddi_rate - cfg.gamma) / cfg.kp)


def combine(l_bce, l_multi, l_ddi, beta, cfg):
    """Weighted total; ``beta`` is a plain float and is not differentiated.

    Returns ``(total, breakdown)`` where ``total`` is a tensor when any
    component is one.
    """
    accuracy = add(mul(as_tensor(l_bce), cfg.alpha), mul(as_tensor(l_multi), 1.0 - cfg.alpha))
    loss = add(mul(accuracy, beta), mul(as_tensor(l_ddi), 1.0 - beta))
    bd = LossBreakdown(
        float(as_tensor(l_bce).data),
        float(as_tensor(l_multi).data),
        float(as_tensor(l_ddi).data),
        float(beta),
        float(loss.data),
    )
    return loss, bd
