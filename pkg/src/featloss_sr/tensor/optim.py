"""Named parameter groups and a bias-corrected Adam update."""
from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError


@dataclass
class ParamGroup:
    """Ordered mapping of parameter name -> array, with per-tensor trainable flags and tags."""

    tensors: dict
    trainable: dict = field(default_factory=dict)
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in self.tensors:
            self.trainable.setdefault(name, True)
        unknown = set(self.trainable) - set(self.tensors)
        if unknown:
            raise KeyError(f"trainable flags for unknown tensors: {sorted(unknown)}")

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def names(self, tag=None):
        return [n for n in self.tensors if tag is None or self.tags.get(n) == tag]

    def set_trainable(self, flag, tag=None):
        for name in self.names(tag):
            self.trainable[name] = flag

    def copy(self):
        return ParamGroup({k: v.copy() for k, v in self.tensors.items()},
                          dict(self.trainable), dict(self.tags))

    def num_parameters(self):
        return int(sum(v.size for v in self.tensors.values()))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """Apply one Adam update to every trainable tensor of ``params``.

    Non-trainable tensors, and their moment estimates, are left exactly as they
    are.  Weight decay is decoupled (applied to the parameter, not the gradient).
    Returns the updated ``(params, state)``; the originals are not modified.
    """
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** step
    corr2 = 1.0 - b2 ** step
    new_tensors = dict(params.tensors)
    m_all, v_all = dict(state.m), dict(state.v)
    for name, p in params.tensors.items():
        if not params.trainable.get(name, True):
            continue
        g = grads.get(name)
        if g is None:
            raise KeyError(f"no gradient for trainable parameter {name!r}")
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        g = g.astype(p.dtype, copy=False)
        m = m_all.get(name, np.zeros_like(p))
        v = v_all.get(name, np.zeros_like(p))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        m_hat = m / corr1
        v_hat = v / corr2
        new = p
        if state.weight_decay:
            new = new - state.lr * state.weight_decay * new
        new = new - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_tensors[name] = new.astype(p.dtype, copy=False)
        m_all[name], v_all[name] = m, v
    new_params = ParamGroup(new_tensors, dict(params.trainable), dict(params.tags))
    new_state = AdamState(state.lr, b1, b2, state.eps, state.weight_decay, step, m_all, v_all)
    return new_params, new_state
