"""Adam and Rectified Adam (RAdam) updates over a flat ``name -> array`` mapping.

Both steps are pure: they return new parameter and state objects and never
mutate their inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .errors import ConfigError, DimensionError

Arrays = Dict[str, np.ndarray]


@dataclass(frozen=True)
class OptimHyper:
    kind: str = "radam"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("adam", "radam"):
            raise ConfigError(f"optimizer must be 'adam' or 'radam', got {self.kind!r}")
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")


@dataclass
class OptimState:
    t: int = 0
    m: Arrays = field(default_factory=dict)
    v: Arrays = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "OptimState":
        return cls(0, {k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()})


def _check(params, grads, state):
    if params.keys() != grads.keys():
        raise DimensionError("gradient names do not match parameter names")
    for k, p in params.items():
        if grads[k].shape != p.shape:
            raise DimensionError(f"{k}: gradient {grads[k].shape} vs parameter {p.shape}")
        if state.t and (state.m[k].shape != p.shape or state.v[k].shape != p.shape):
            raise DimensionError(f"{k}: optimizer state does not mirror the parameter")


def _moments(params, grads, state, hyper):
    if not state.m:
        state = OptimState.zeros_like(params)
    _check(params, grads, state)
    b1, b2 = hyper.beta1, hyper.beta2
    m = {k: b1 * state.m[k] + (1 - b1) * g for k, g in grads.items()}
    v = {k: b2 * state.v[k] + (1 - b2) * (g * g) for k, g in grads.items()}
    return OptimState(state.t + 1, m, v)


def radam_rectifier(t: int, beta2: float) -> Tuple[float, Optional[float]]:
    """(rho_t, r_t) at step ``t``; ``r_t`` is None while rho_t <= 4 (warm-up)."""
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    b2t = beta2 ** t
    rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t)
    if rho_t <= 4.0:
        return rho_t, None
    r = math.sqrt(((rho_t - 4) * (rho_t - 2) * rho_inf) / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
    return rho_t, r


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: OptimState, hyper: OptimHyper):
    """Bias-corrected Adam; returns ``(new_params, new_state)``."""
    state = _moments(params, grads, state, hyper)
    t = state.t
    c1 = 1.0 - hyper.beta1 ** t
    c2 = 1.0 - hyper.beta2 ** t
    new = {}
    for k, p in params.items():
        m_hat = state.m[k] / c1
        v_hat = state.v[k] / c2
        new[k] = p - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return new, state


def radam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
               state: OptimState, hyper: OptimHyper):
    """Rectified Adam; un-adapted momentum SGD while the variance is intractable."""
    state = _moments(params, grads, state, hyper)
    t = state.t
    c1 = 1.0 - hyper.beta1 ** t
    c2 = 1.0 - hyper.beta2 ** t
    _, r_t = radam_rectifier(t, hyper.beta2)
    new = {}
    for k, p in params.items():
        m_hat = state.m[k] / c1
        if r_t is None:
            new[k] = p - hyper.lr * m_hat
        else:
            new[k] = p - hyper.lr * r_t * m_hat / (np.sqrt(state.v[k] / c2) + hyper.eps)
    return new, state


def optimizer_step(params, grads, state, hyper: OptimHyper):
    step = radam_step if hyper.kind == "radam" else adam_step
    return step(params, grads, state, hyper)
