"""Forward-noising schedule: beta/alpha tables and the closed-form noising operators.

Timesteps are 1-based (t = 1..T).  All table arithmetic is float64; consumers
may downcast.  The noising operators work on numpy arrays and torch tensors
alike because the schedule coefficients are plain Python floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np


class ScheduleError(ValueError):
    """Invalid schedule construction parameters."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta_t, alpha_t = 1 - beta_t and alpha_bar_t = prod alpha_i tables."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    def _index(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise IndexError(f"timestep {t} outside 1..{self.T}")
        return t - 1

    def beta(self, t: int) -> float:
        return float(self.betas[self._index(t)])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._index(t)])

    def to_config(self) -> dict:
        return {
            "T": self.T,
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
        }


@dataclass(frozen=True)
class NoisedImage:
    """A noised image together with the exact Gaussian draw that produced it."""

    x_t: Any
    t: int
    eps: Any


def build_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Endpoint-inclusive linear beta schedule.  T=1 degenerates to [beta_start]."""
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def default_schedule(T: int = 1000) -> NoiseSchedule:
    """DDPM-convention linear schedule, beta from 1e-4 to 0.02."""
    return build_linear_schedule(T, 1e-4, 0.02)


def alpha_bar(s: NoiseSchedule, t: int) -> float:
    """Cumulative product alpha_bar_t; raises IndexError outside 1..T."""
    return float(s.alpha_bars[s._index(t)])


def q_sample(x0: Any, t: int, eps: Any, s: NoiseSchedule) -> NoisedImage:
    """Closed-form noising x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.

    No pixel clamping: noised images may leave [0, 1].  Differentiable in x0
    when called with torch tensors (eps is treated as a constant).
    """
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    ab = alpha_bar(s, t)
    x_t = math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps
    return NoisedImage(x_t=x_t, t=t, eps=eps)


def forward_step(x_prev: Any, t: int, eps: Any, s: NoiseSchedule) -> NoisedImage:
    """Single Markov step x_t = sqrt(1 - beta_t) x_prev + sqrt(beta_t) eps."""
    if tuple(x_prev.shape) != tuple(eps.shape):
        raise ValueError(
            f"eps shape {tuple(eps.shape)} != x_prev shape {tuple(x_prev.shape)}"
        )
    b = s.beta(t)
    x_t = math.sqrt(1.0 - b) * x_prev + math.sqrt(b) * eps
    return NoisedImage(x_t=x_t, t=t, eps=eps)
