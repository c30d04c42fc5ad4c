"""Step-size schedules and the two parameter update rules used by the trainers."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, InvalidConfigError


@dataclass(frozen=True)
class Schedule:
    """Polynomially decaying step size alpha_t = alpha0 / (offset + t)**gamma.

    gamma must lie in (0, 1]; the divergent-sum / summable-squares property
    needed for online convergence holds exactly when gamma > 1/2, exposed as
    ``robbins_monro``.  Construction warns (but succeeds) for gamma <= 1/2.
    """

    alpha0: float
    gamma: float
    offset: float = 1.0

    def __post_init__(self):
        if not self.alpha0 > 0.0:
            raise InvalidConfigError(f"alpha0 must be positive, got {self.alpha0}")
        if not 0.0 < self.gamma <= 1.0:
            raise InvalidConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not self.offset > 0.0:
            raise InvalidConfigError(f"offset must be positive, got {self.offset}")
        if self.gamma <= 0.5:
            warnings.warn(
                f"gamma={self.gamma} <= 1/2: squared step sizes are not summable",
                stacklevel=2,
            )

    @property
    def robbins_monro(self) -> bool:
        return self.gamma > 0.5

    def rate(self, t) -> float:
        return self.alpha0 / (self.offset + t) ** self.gamma


def schedule_rate(schedule: Schedule, t) -> float:
    """Step size at step t (t >= 0)."""
    return schedule.rate(t)


def sgd_apply(theta: np.ndarray, g: np.ndarray, alpha: float) -> np.ndarray:
    """Plain gradient step theta - alpha * g."""
    theta = np.asarray(theta, dtype=float)
    g = np.asarray(g, dtype=float)
    if theta.shape != g.shape:
        raise DimensionMismatchError("gradient", theta.shape, g.shape)
    return theta - alpha * g


@dataclass(frozen=True)
class RmspropState:
    """Running squared-gradient average; entries stay nonnegative."""

    v: np.ndarray
    rho: float = 0.9
    eps: float = 1e-8

    @classmethod
    def zeros(cls, shape, rho: float = 0.9, eps: float = 1e-8) -> "RmspropState":
        if isinstance(shape, int):
            shape = (shape,)
        return cls(v=np.zeros(shape), rho=rho, eps=eps)


def rmsprop_delta(g: np.ndarray, alpha: float,
                  state: RmspropState) -> tuple[np.ndarray, RmspropState]:
    """Parameter increment -alpha g / (sqrt(v') + eps) with v' = rho v + (1-rho) g^2."""
    g = np.asarray(g, dtype=float)
    if state.v.shape != g.shape:
        raise DimensionMismatchError("rmsprop state", g.shape, state.v.shape)
    v = state.rho * state.v + (1.0 - state.rho) * g * g
    delta = -alpha * g / (np.sqrt(v) + state.eps)
    return delta, RmspropState(v=v, rho=state.rho, eps=state.eps)


def rmsprop_apply(theta: np.ndarray, g: np.ndarray, alpha: float,
                  state: RmspropState) -> tuple[np.ndarray, RmspropState]:
    """RMSprop update: v' = rho v + (1-rho) g^2, theta' = theta - alpha g / (sqrt(v') + eps)."""
    theta = np.asarray(theta, dtype=float)
    g = np.asarray(g, dtype=float)
    if theta.shape != g.shape:
        raise DimensionMismatchError("gradient", theta.shape, g.shape)
    delta, state_next = rmsprop_delta(g, alpha, state)
    return theta + delta, state_next
