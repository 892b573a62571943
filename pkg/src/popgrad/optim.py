"""SGD, Nesterov, RMSProp, Adam, AdamW, AMSGrad and Adamax on flat vectors.

The update rules follow the usual framework semantics. The step counter is
incremented before the update; weight decay is added to the gradient for
every method except AdamW, where it is applied as a separate decoupled step.
``apply_update`` never mutates its inputs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError, NumericDivergenceError, UsageError

KINDS = ("sgd", "nesterov", "rmsprop", "adam", "adamw", "amsgrad", "adamax")

# the two meta-parameters each method is tuned over
META_PARAMS = {
    "sgd": ("momentum", "dampening"),
    "nesterov": ("momentum", "dampening"),
    "rmsprop": ("momentum", "alpha"),
    "adam": ("beta1", "beta2"),
    "adamw": ("beta1", "beta2"),
    "amsgrad": ("beta1", "beta2"),
    "adamax": ("beta1", "beta2"),
}


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    dampening: float = 0.0
    alpha: float = 0.99
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-5
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown optimizer {self.kind!r}; expected one of {KINDS}")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        for name in ("momentum", "dampening", "alpha", "beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {v}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not self.eps > 0:
            raise ConfigError("eps must be > 0")

    def to_dict(self):
        return asdict(self)

    def with_meta(self, v1, v2):
        a, b = META_PARAMS[self.kind]
        return replace(self, **{a: v1, b: v2})


@dataclass
class OptimizerState:
    t: int = 0
    buffers: dict = field(default_factory=dict)

    def copy(self):
        return OptimizerState(self.t, {k: v.copy() for k, v in self.buffers.items()})


def init_state(n_params):
    return OptimizerState(0, {})


def _buf(state, name, like):
    b = state.buffers.get(name)
    return np.zeros_like(like) if b is None else b


def apply_update(state, params, grad, config, lr_now=None):
    """One optimiser step; returns ``(new_params, new_state)``."""
    lr = config.lr if lr_now is None else lr_now
    if not lr > 0:
        raise UsageError("learning rate must be > 0")
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise UsageError(f"params {params.shape} and grad {grad.shape} differ in shape")
    kind = config.kind
    t = state.t + 1
    bufs = {}
    wd = config.weight_decay

    if kind == "adamw":
        g = grad
    else:
        g = grad + wd * params if wd else grad

    if kind in ("sgd", "nesterov"):
        mu = config.momentum
        if mu:
            prev = state.buffers.get("momentum")
            v = g.copy() if prev is None else mu * prev + (1.0 - config.dampening) * g
            bufs["momentum"] = v
            step = g + mu * v if kind == "nesterov" else v
        else:
            step = g
        new = params - lr * step
    elif kind == "rmsprop":
        a = config.alpha
        sq = a * _buf(state, "square_avg", params) + (1.0 - a) * g * g
        buf = config.momentum * _buf(state, "momentum", params) + g / (np.sqrt(sq) + config.eps)
        bufs["square_avg"], bufs["momentum"] = sq, buf
        new = params - lr * buf
    else:
        b1, b2 = config.beta1, config.beta2
        m = b1 * _buf(state, "exp_avg", params) + (1.0 - b1) * g
        bufs["exp_avg"] = m
        if kind == "adamax":
            u = np.maximum(b2 * _buf(state, "exp_inf", params), np.abs(g))
            bufs["exp_inf"] = u
            new = params - (lr / (1.0 - b1 ** t)) * m / (u + config.eps)
        else:
            v = b2 * _buf(state, "exp_avg_sq", params) + (1.0 - b2) * g * g
            bufs["exp_avg_sq"] = v
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            if kind == "amsgrad":
                v_hat = np.maximum(_buf(state, "max_exp_avg_sq", params), v_hat)
                bufs["max_exp_avg_sq"] = v_hat
            base = params - lr * wd * params if kind == "adamw" else params
            new = base - lr * m_hat / (np.sqrt(v_hat) + config.eps)

    if not np.all(np.isfinite(new)):
        raise NumericDivergenceError(f"non-finite {kind} update at step {t}")
    return new, OptimizerState(t, bufs)


def lr_schedule(epoch, total_epochs, n_eras, era_decay, lr0):
    """Piecewise-constant LR: ``lr0 * era_decay ** era`` over ``n_eras`` equal eras.

    ``epoch`` is 0-based.
    """
    if not 1 <= n_eras <= total_epochs:
        raise UsageError(f"n_eras={n_eras} must lie in 1..{total_epochs}")
    if not 0 < era_decay <= 1:
        raise UsageError("era_decay must lie in (0, 1]")
    era = math.floor(epoch * n_eras / total_epochs)
    return lr0 * era_decay ** era
