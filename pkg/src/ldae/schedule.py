"""Noise schedules and the forward corruption draw.

A schedule maps an integer time t in [0, steps] to coefficients
(gamma_t, sigma_t); the corrupted sample is z_t = gamma_t * z0 +
sigma_t * eps with eps ~ N(0, I). Four kinds:

  ddpm_linear_beta  gamma_t^2 = prod_{s<=t} (1 - beta_s), beta linear in
                    [beta_start, beta_end]; sigma^2 = 1 - gamma^2
  linear_gamma_sq   gamma_t^2 = 1 - t/steps; sigma^2 = t/steps
  fixed_gamma       gamma = 1; sigma_t = sigma_max * t / steps
  single_level      gamma = 1; sigma_t = sigma_const for every t

The first two are variance-preserving (gamma^2 + sigma^2 = 1); the last
two add noise without scaling the signal. t = 0 always means the clean
endpoint except for single_level, whose noise level never varies.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

SCHEDULE_KINDS = ("ddpm_linear_beta", "linear_gamma_sq", "fixed_gamma", "single_level")


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    steps: int = 1000
    beta_start: float = 1e-4  # ddpm_linear_beta only
    beta_end: float = 0.02  # ddpm_linear_beta only
    sigma_max: float = float(np.sqrt(2.0))  # fixed_gamma only
    sigma_const: float = float(np.sqrt(1.0 / 3.0))  # single_level only

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.kind == "ddpm_linear_beta":
            if not (0.0 < self.beta_start <= self.beta_end < 1.0):
                raise ValueError(
                    f"need 0 < beta_start <= beta_end < 1, got "
                    f"{self.beta_start}, {self.beta_end}"
                )
        if self.sigma_max < 0 or self.sigma_const < 0:
            raise ValueError("sigma bounds must be non-negative")


@functools.lru_cache(maxsize=32)
def _ddpm_gamma_sq(steps: int, beta_start: float, beta_end: float) -> np.ndarray:
    """gamma_t^2 for t = 0..steps; index 0 is the clean endpoint (1.0)."""
    betas = np.linspace(beta_start, beta_end, steps)
    out = np.empty(steps + 1)
    out[0] = 1.0
    out[1:] = np.cumprod(1.0 - betas)
    out.setflags(write=False)
    return out


def gamma_sigma(schedule: NoiseSchedule, t) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients (gamma_t, sigma_t); t is an int or integer array in [0, steps]."""
    t = np.asarray(t)
    if not np.issubdtype(t.dtype, np.integer):
        raise ValueError(f"t must be integer, got dtype {t.dtype}")
    if np.any(t < 0) or np.any(t > schedule.steps):
        raise ValueError(f"t out of range [0, {schedule.steps}]")
    frac = t / schedule.steps
    if schedule.kind == "ddpm_linear_beta":
        gsq = _ddpm_gamma_sq(schedule.steps, schedule.beta_start, schedule.beta_end)[t]
        return np.sqrt(gsq), np.sqrt(1.0 - gsq)
    if schedule.kind == "linear_gamma_sq":
        return np.sqrt(1.0 - frac), np.sqrt(frac)
    if schedule.kind == "fixed_gamma":
        return np.ones_like(frac), schedule.sigma_max * frac
    # single_level: constant regardless of t
    return np.ones_like(frac), np.full_like(frac, schedule.sigma_const)


@dataclass(frozen=True)
class DiffusionDraw:
    """One forward corruption: all pieces needed to form targets later."""

    z0: np.ndarray  # clean tokens (..., c)
    t: np.ndarray  # () or (B,) int
    eps: np.ndarray  # noise, same shape as z0
    z_t: np.ndarray  # gamma * z0 + sigma * eps
    gamma: np.ndarray  # broadcastable to z0
    sigma: np.ndarray


def _expand(coef: np.ndarray, t: np.ndarray, ndim: int) -> np.ndarray:
    """Reshape per-example coefficients to broadcast over token axes."""
    if t.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (ndim - 1))


def diffuse(
    z0: np.ndarray, schedule: NoiseSchedule, t, rng: np.random.Generator
) -> DiffusionDraw:
    """Draw eps and corrupt z0 at time t.

    t is a scalar applied to every example, or an array matching the
    leading axis of z0 for per-example times.
    """
    t = np.asarray(t)
    if t.ndim not in (0, 1):
        raise ValueError(f"t must be scalar or 1-D, got shape {t.shape}")
    if t.ndim == 1 and t.shape[0] != z0.shape[0]:
        raise ValueError(f"{t.shape[0]} times for leading axis {z0.shape[0]}")
    gamma, sigma = gamma_sigma(schedule, t)
    eps = rng.standard_normal(z0.shape)
    g = _expand(gamma, t, z0.ndim)
    s = _expand(sigma, t, z0.ndim)
    return DiffusionDraw(z0=z0, t=t, eps=eps, z_t=g * z0 + s * eps, gamma=g, sigma=s)


def schedule_table(schedule: NoiseSchedule) -> np.ndarray:
    """Rows (t, gamma_sq, sigma_sq) for t = 0..steps, for CSV export."""
    t = np.arange(schedule.steps + 1)
    gamma, sigma = gamma_sigma(schedule, t)
    return np.column_stack([t.astype(np.float64), gamma**2, sigma**2])
