"""Adam with bias correction, operating in place on parameter tensors."""

from dataclasses import dataclass, field

import numpy as np

from safedrug.errors import ShapeMismatch


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step": self.step,
            "m": {k: a.tolist() for k, a in sorted(self.m.items())},
            "v": {k: a.tolist() for k, a in sorted(self.v.items())},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            lr=d["lr"],
            beta1=d["beta1"],
            beta2=d["beta2"],
            eps=d["eps"],
            step=d["step"],
            m={k: np.asarray(a, dtype=np.float64) for k, a in d["m"].items()},
            v={k: np.asarray(a, dtype=np.float64) for k, a in d["v"].items()},
        )


def adam_step(params, grads, state):
    """Apply one Adam update.

    ``params`` maps names to tensors (updated in place); ``grads`` maps the
    same names to arrays, a missing or ``None`` gradient counts as zero.
    Returns ``state`` with the step counter advanced.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ShapeMismatch(f"adam_step: gradient {g.shape} for parameter {name} of shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ShapeMismatch(f"adam_step: moment {m.shape} for parameter {name} of shape {p.shape}")
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update
    return state
