"""Adam over ParamStore gradient slots.

Classic formulation: epsilon outside the square root, bias correction
on both moments.  Defaults lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamStore


@dataclass
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def adam_init(params: ParamStore) -> AdamState:
    m = {n: np.zeros_like(params[n].data) for n in params.trainable_names()}
    v = {n: np.zeros_like(params[n].data) for n in params.trainable_names()}
    return AdamState(m=m, v=v, t=0)


def adam_step(params: ParamStore, state: AdamState,
              config: AdamConfig | None = None) -> None:
    """One in-place update of every trainable entry; grads zeroed after."""
    cfg = config or AdamConfig()
    if not params.grads_ready:
        raise RuntimeError("adam_step called with no gradients available; "
                           "run a backward pass first")
    state.t += 1
    t = state.t
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name in state.m:
        p = params[name]
        g = p.grad
        state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        mhat = state.m[name] / bc1
        vhat = state.v[name] / bc2
        p.data -= (cfg.lr * mhat / (np.sqrt(vhat) + cfg.epsilon)).astype(p.data.dtype)
    params.zero_grads()
