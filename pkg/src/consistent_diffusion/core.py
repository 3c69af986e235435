"""Variance-exploding diffusion process under the identity schedule sigma(t) = t.

Time and noise level coincide, so every function here accepts ``t`` and
treats it as the noise standard deviation. Arrays follow the convention
``x.shape == (..., d)``; ``t`` may be a scalar or have shape ``x.shape[:-1]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIGMA_MIN = 0.002
SIGMA_MAX = 15.0


class DomainError(ValueError):
    """A time / noise level outside the region where the process is defined."""


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = SIGMA_MIN
    sigma_max: float = SIGMA_MAX

    def __post_init__(self):
        if not (np.isfinite(self.sigma_min) and self.sigma_min > 0):
            raise DomainError(f"sigma_min must be > 0, got {self.sigma_min}")
        if not (np.isfinite(self.sigma_max) and self.sigma_max > self.sigma_min):
            raise DomainError(f"sigma_max must exceed sigma_min, got {self.sigma_max}")

    @property
    def T(self) -> float:
        return self.sigma_max

    def sigma(self, t):
        return sigma_at(self, t)

    def g2(self, t):
        return g_squared_at(self, t)


def _check_t(t, *, strict: bool, upper: float | None = None) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise DomainError("time must be finite")
    if strict and np.any(t <= 0):
        raise DomainError(f"time must be > 0, got min {t.min()}")
    if not strict and np.any(t < 0):
        raise DomainError(f"time must be >= 0, got min {t.min()}")
    if upper is not None and np.any(t > upper * (1 + 1e-12)):
        raise DomainError(f"time {t.max()} exceeds sigma_max {upper}")
    return t


def _bcast(t: np.ndarray, x: np.ndarray) -> np.ndarray:
    # (n,) times broadcast against (n, d) states
    return t[..., None] if t.ndim else t


def sigma_at(schedule: NoiseSchedule, t):
    t = _check_t(t, strict=False, upper=schedule.sigma_max)
    return t if t.ndim else float(t)


def g_squared_at(schedule: NoiseSchedule, t):
    """d(sigma^2)/dt, which is 2t for the identity schedule."""
    t = _check_t(t, strict=True)
    out = 2.0 * t
    return out if out.ndim else float(out)


def perturb(x0, t, z, schedule: NoiseSchedule | None = None) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x0.shape != z.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs z {z.shape}")
    sigma = sigma_at(schedule or NoiseSchedule(), t)
    return x0 + _bcast(np.asarray(sigma), x0) * z


def score_from_denoiser(h_out, x, t) -> np.ndarray:
    h_out = np.asarray(h_out, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if h_out.shape != x.shape:
        raise ValueError(f"shape mismatch: {h_out.shape} vs {x.shape}")
    t = _bcast(_check_t(t, strict=True), x)
    return (h_out - x) / (t * t)


def denoiser_from_score(score, x, t) -> np.ndarray:
    score = np.asarray(score, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if score.shape != x.shape:
        raise ValueError(f"shape mismatch: {score.shape} vs {x.shape}")
    t = _bcast(_check_t(t, strict=True), x)
    return x + (t * t) * score


def ode_drift(x, t, score, schedule: NoiseSchedule | None = None) -> np.ndarray:
    """dx/dt of the probability-flow ODE: -g(t)^2 * score / 2."""
    g2 = np.asarray(g_squared_at(schedule or NoiseSchedule(), t))
    return -0.5 * _bcast(g2, np.asarray(score)) * np.asarray(score, dtype=np.float64)


def sde_drift_diffusion(x, t, score, schedule: NoiseSchedule | None = None):
    """Drift and diffusion coefficient of the backward SDE.

    The Brownian increment is not drawn here; integrators multiply the
    returned diffusion by sqrt(|dt|) times their own standard normal draw.
    """
    g2 = np.asarray(g_squared_at(schedule or NoiseSchedule(), t))
    score = np.asarray(score, dtype=np.float64)
    drift = -_bcast(g2, score) * score
    diffusion = np.sqrt(g2)
    return drift, (diffusion if diffusion.ndim else float(diffusion))
