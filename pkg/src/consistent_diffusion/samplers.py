"""Generation-time integrators for the identity-schedule VE process.

A denoiser is any callable ``h(x, sigma, cond) -> x0_hat`` operating on
``(n, d)`` batches; the score follows from Tweedie's formula, so every
integrator here is written in terms of ``(x - h) / sigma``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import SIGMA_MAX, SIGMA_MIN
from .nn import Conditioning

SQRT2_M1 = float(np.sqrt(2.0) - 1.0)


class SamplingError(FloatingPointError):
    pass


@dataclass
class SamplerParams:
    n_steps: int = 18
    s_churn: float = 11.0
    s_min: float = 0.05
    s_max: float = 15.0
    s_noise: float = 1.003
    rho: float = 7.0
    sigma_lo: float = SIGMA_MIN
    sigma_hi: float = SIGMA_MAX
    prior_center: str = "mu"

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("n_steps must be a positive integer")
        self.n_steps = int(self.n_steps)
        if self.s_noise <= 0:
            raise ValueError("s_noise must be > 0")
        if not 0 < self.s_min < self.s_max:
            raise ValueError("need 0 < s_min < s_max")
        if self.s_churn < 0:
            raise ValueError("s_churn must be >= 0")
        if not 0 < self.sigma_lo < self.sigma_hi:
            raise ValueError("need 0 < sigma_lo < sigma_hi")
        if self.rho <= 0:
            raise ValueError("rho must be > 0")
        if self.prior_center not in ("mu", "zero"):
            raise ValueError("prior_center must be 'mu' or 'zero'")

    def to_dict(self) -> dict:
        return asdict(self)


def time_grid(params: SamplerParams) -> np.ndarray:
    """Power-law noise levels from sigma_hi down to sigma_lo, then a final 0."""
    n = params.n_steps
    inv = 1.0 / params.rho
    if n == 1:
        sig = np.array([params.sigma_hi])
    else:
        frac = np.arange(n) / (n - 1)
        lo, hi = params.sigma_lo**inv, params.sigma_hi**inv
        sig = (hi + frac * (lo - hi)) ** params.rho
        sig[0], sig[-1] = params.sigma_hi, params.sigma_lo
    return np.append(sig, 0.0)


def churn_gamma(params: SamplerParams, sigma: float) -> float:
    if params.s_min <= sigma <= params.s_max:
        return min(params.s_churn / params.n_steps, SQRT2_M1)
    return 0.0


def _check(x, step):
    if not np.all(np.isfinite(x)):
        raise SamplingError(f"non-finite state at step {step}")


def _slope(denoiser, x, sigma, cond):
    return (x - denoiser(x, np.full(x.shape[0], sigma), cond)) / sigma


def euler_maruyama_step(denoiser, x, t_cur, t_next, cond, z, diffusion_scale=1.0):
    """One Euler-Maruyama step of the backward SDE from ``t_cur`` to ``t_next``.

    ``t_cur`` / ``t_next`` are scalars or per-row ``(n,)`` arrays. With score
    ``(h - x)/t^2`` and ``g^2 = 2t`` the drift contribution over ``dt < 0`` is
    ``2 (h - x) |dt| / t``; the noise is ``sqrt(2 t |dt|) z``.
    Returns the new state and the denoiser output that was used.
    """
    n = x.shape[0]
    t_cur = np.broadcast_to(np.asarray(t_cur, dtype=np.float64), (n,))
    t_next = np.broadcast_to(np.asarray(t_next, dtype=np.float64), (n,))
    h = denoiser(x, t_cur, cond)
    step = (t_cur - t_next)[:, None]
    g = np.sqrt(2.0 * t_cur)[:, None]
    x_new = x + 2.0 * (h - x) * step / t_cur[:, None]
    if diffusion_scale:
        x_new = x_new + diffusion_scale * g * np.sqrt(step) * z
    return x_new, h


def euler_ode_sample(denoiser, start, grid, cond: Conditioning | None = None) -> np.ndarray:
    x = np.array(start, dtype=np.float64)
    for i in range(len(grid) - 1):
        s, s_next = grid[i], grid[i + 1]
        x = x + (s_next - s) * _slope(denoiser, x, s, cond)
        _check(x, i)
    return x


def euler_maruyama_sde_sample(
    denoiser,
    start,
    grid,
    cond: Conditioning | None,
    rng: np.random.Generator,
    diffusion_scale: float = 1.0,
) -> np.ndarray:
    x = np.array(start, dtype=np.float64)
    for i in range(len(grid) - 1):
        z = rng.standard_normal(x.shape)
        x, _ = euler_maruyama_step(denoiser, x, grid[i], grid[i + 1], cond, z, diffusion_scale)
        _check(x, i)
    return x


def churn(x, sigma, gamma, s_noise, z):
    """Raise the noise level of ``x`` from ``sigma`` to ``sigma * (1 + gamma)``."""
    sigma_hat = sigma * (1.0 + gamma)
    x_hat = x + np.sqrt(sigma_hat**2 - sigma**2) * s_noise * z
    return x_hat, sigma_hat


def _heun_loop(denoiser, x, grid, cond, params: SamplerParams | None, rng):
    for i in range(len(grid) - 1):
        s, s_next = grid[i], grid[i + 1]
        gamma = churn_gamma(params, s) if params is not None else 0.0
        if gamma > 0:
            x, s_hat = churn(x, s, gamma, params.s_noise, rng.standard_normal(x.shape))
        else:
            s_hat = s
        d = _slope(denoiser, x, s_hat, cond)
        x_next = x + (s_next - s_hat) * d
        if s_next > 0:
            d2 = _slope(denoiser, x_next, s_next, cond)
            x_next = x + (s_next - s_hat) * 0.5 * (d + d2)
        x = x_next
        _check(x, i)
    return x


def heun_ode_sample(denoiser, start, grid, cond: Conditioning | None = None) -> np.ndarray:
    return _heun_loop(denoiser, np.array(start, dtype=np.float64), grid, cond, None, None)


def stochastic_heun_sample(
    denoiser,
    cond: Conditioning | None,
    params: SamplerParams,
    rng: np.random.Generator,
    shape: tuple[int, int] | None = None,
) -> np.ndarray:
    """Heun sampler with churn, starting from ``N(center, sigma_hi^2 I)``.

    ``center`` is ``cond.mu`` when ``params.prior_center == "mu"`` and mu is
    given, zero otherwise. ``shape`` is required when there is no mu.
    """
    mu = None if cond is None else cond.mu
    if shape is None:
        if mu is None:
            raise ValueError("shape is required when no mu conditioning is given")
        shape = np.shape(mu)
    grid = time_grid(params)
    x = grid[0] * rng.standard_normal(shape)
    if params.prior_center == "mu" and mu is not None:
        x = x + mu
    return _heun_loop(denoiser, x, grid, cond, params, rng)
