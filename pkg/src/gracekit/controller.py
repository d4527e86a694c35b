"""Adaptive distillation-strength controller.

The controller treats ``beta`` as a Lagrange multiplier on the constraint
``EMA(L_gdkd) <= tau`` and moves it by projected dual ascent once per
optimizer step. ``beta`` never receives gradients from the training loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .errors import ConfigError, DomainError


@dataclass(frozen=True)
class ControllerConfig:
    tau: float = 0.35
    eta: float = 0.0015
    beta_init: float = 1.0
    beta_min: float = 0.1
    beta_max: float = 5.0
    ema_decay: float = 0.99
    omega: float = 1.0

    def __post_init__(self):
        if not 0 <= self.beta_min <= self.beta_init <= self.beta_max:
            raise ConfigError("need 0 <= beta_min <= beta_init <= beta_max")
        if not 0 < self.ema_decay < 1:
            raise ConfigError("ema_decay must lie in (0, 1)")
        if self.eta <= 0 or self.tau <= 0:
            raise ConfigError("eta and tau must be positive")


@dataclass(frozen=True)
class ControllerState:
    beta: float
    ema_loss: float = 0.0
    step: int = 0
    initialized: bool = False

    @classmethod
    def initial(cls, cfg: ControllerConfig = ControllerConfig()) -> "ControllerState":
        return cls(beta=cfg.beta_init)


def update(state: ControllerState, gdkd_loss: float, cfg: ControllerConfig = ControllerConfig()) -> ControllerState:
    """One EMA + projected dual-ascent step. The first call seeds the EMA."""
    loss = float(gdkd_loss)
    if not math.isfinite(loss) or loss < 0:
        raise DomainError(f"gdkd loss must be finite and non-negative, got {gdkd_loss!r}")
    if state.initialized:
        ema = cfg.ema_decay * state.ema_loss + (1.0 - cfg.ema_decay) * loss
    else:
        ema = loss
    beta = min(cfg.beta_max, max(cfg.beta_min, state.beta + cfg.eta * (ema - cfg.tau)))
    return replace(state, beta=beta, ema_loss=ema, step=state.step + 1, initialized=True)


def total_loss(ce, gdkd, rcka, state: ControllerState, cfg: ControllerConfig = ControllerConfig()):
    """CE + beta * GDKD + omega * RCKA with beta held constant.

    Works on floats or tape variables; the constant ``-beta * tau`` term of the
    Lagrangian is omitted because it has no gradient.
    """
    return ce + gdkd * state.beta + rcka * cfg.omega


@dataclass(frozen=True)
class AffineResponse:
    """Expected GDKD loss as a function of beta: ``intercept - slope * beta``."""

    intercept: float = 0.5
    slope: float = 0.1

    def __call__(self, beta: float) -> float:
        return self.intercept - self.slope * beta

    def fixed_point(self, tau: float) -> float:
        return (self.intercept - tau) / self.slope


@dataclass(frozen=True)
class Trajectory:
    step: np.ndarray
    beta: np.ndarray
    ema_loss: np.ndarray
    raw_loss: np.ndarray

    def deviation(self, tau: float) -> float:
        return abs(float(self.ema_loss[-1]) - tau)


def simulate_dynamics(response: Callable[[float], float], steps: int,
                      cfg: ControllerConfig = ControllerConfig(), mode: str = "adaptive",
                      noise: float = 0.0, seed: int = 0) -> Trajectory:
    """Run the controller against a loss-response model.

    At every step the observed loss is ``response(beta) + noise * N(0, 1)``
    (floored at 0). In ``fixed`` mode beta stays at ``beta_init`` while the EMA
    still tracks the loss.
    """
    if mode not in ("adaptive", "fixed"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(steps) if noise > 0 else np.zeros(steps)
    betas = np.empty(steps)
    emas = np.empty(steps)
    raws = np.empty(steps)
    # same arithmetic as update(), unrolled on floats for speed
    beta, ema = cfg.beta_init, 0.0
    decay, keep = cfg.ema_decay, 1.0 - cfg.ema_decay
    adaptive = mode == "adaptive"
    for t in range(steps):
        raw = max(0.0, response(beta) + noise * float(eps[t]))
        ema = decay * ema + keep * raw if t else raw
        if adaptive:
            beta = min(cfg.beta_max, max(cfg.beta_min, beta + cfg.eta * (ema - cfg.tau)))
        betas[t], emas[t], raws[t] = beta, ema, raw
    return Trajectory(np.arange(1, steps + 1), betas, emas, raws)
