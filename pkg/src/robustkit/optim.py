"""SGD with momentum and coupled weight decay.

The update is the decoupled-velocity formulation

    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v

applied independently per named parameter.  Parameter and velocity maps are
never mutated; fresh tensors are returned so callers can keep snapshots.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .tensor import Tensor


def zero_velocity(params: dict) -> dict:
    """A velocity map of zeros matching ``params`` in keys, shapes and dtype."""
    return {k: Tensor(np.zeros(t.shape, dtype=t.dtype), dtype=t.dtype) for k, t in params.items()}


def sgd_momentum_step(params: dict, grads, velocity: dict, lr: float,
                      momentum: float, weight_decay: float) -> tuple[dict, dict]:
    """One optimizer step over maps keyed by parameter name.

    All three maps must share exactly the same keys and per-key shapes.
    Returns (new_params, new_velocity).
    """
    pkeys = set(params)
    if set(grads.keys()) != pkeys or set(velocity) != pkeys:
        missing = pkeys.symmetric_difference(grads.keys()) | pkeys.symmetric_difference(velocity)
        raise ConfigError(f"optimizer maps disagree on keys: {sorted(missing)}")
    lr = float(lr)
    momentum = float(momentum)
    weight_decay = float(weight_decay)

    new_params = {}
    new_velocity = {}
    for name, p in params.items():
        g = grads[name]
        v = velocity[name]
        if g.shape != p.shape or v.shape != p.shape:
            raise ConfigError(
                f"shape mismatch for '{name}': param {p.shape}, grad {g.shape}, velocity {v.shape}"
            )
        vd = momentum * v.data + g.data + weight_decay * p.data
        new_velocity[name] = Tensor(vd, dtype=p.dtype)
        new_params[name] = Tensor(p.data - lr * vd, requires_grad=p.requires_grad,
                                  name=p.name, dtype=p.dtype)
    return new_params, new_velocity
