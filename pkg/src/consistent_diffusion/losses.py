"""Training objectives: denoising score matching, the consistency loss and its
backward-SDE rollout, prior/duration MSEs, their weighted sum, and the toy
training loop on Gaussian-mixture data.

Loss functions take their random draws explicitly so that the same draws can
be replayed (finite-difference checks, paired comparisons); the ``sample_*``
helpers produce those draws from a generator.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .core import NoiseSchedule
from .gmm import GaussianMixture
from .gmm import sample as gmm_sample
from .nn import Adam, Conditioning
from .samplers import euler_maruyama_step

HISTORY_COLUMNS = ("step", "L_duration", "L_prior", "L_DSM", "L_CDM", "L_final", "wall_ms")


class NumericError(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message, step, last_params, history):
        super().__init__(message)
        self.step = step
        self.last_params = last_params
        self.history = history


@dataclass
class TrainConfig:
    lam: float = 2.0
    epsilon: float = 0.05
    k_rollout: int = 6
    rollout_samples: int = 1
    stop_gradient_rollout: bool = True
    t_min: float = 0.02
    lr: float = 1e-3
    batch_size: int = 256
    n_steps: int = 2000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.k_rollout < 1 or self.rollout_samples < 1:
            raise ValueError("k_rollout and rollout_samples must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.t_min <= 0:
            raise ValueError("t_min must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


@dataclass
class LossResult:
    value: float
    grads: dict[str, np.ndarray] | None = None
    input_grads: dict[str, np.ndarray] = field(default_factory=dict)
    output: np.ndarray | None = None


def _differentiable(denoiser) -> bool:
    return hasattr(denoiser, "backward") and hasattr(denoiser, "forward")


def _eval(denoiser, x, t, cond):
    if _differentiable(denoiser):
        return denoiser.forward(x, t, cond)
    return denoiser(x, t, cond), None


def _add(acc: dict, new: dict, scale: float = 1.0):
    for k, v in new.items():
        acc[k] = acc[k] + scale * v if k in acc else scale * v
    return acc


def _finite(value, what, t, x):
    if not math.isfinite(value):
        norm = float(np.linalg.norm(x)) if x is not None else float("nan")
        raise NumericError(
            f"{what} is not finite (t range [{np.min(t):.4g}, {np.max(t):.4g}], |x_t| = {norm:.4g})"
        )


# --- draws -------------------------------------------------------------------


def sample_t(rng: np.random.Generator, n: int, t_min: float, t_max: float) -> np.ndarray:
    """Log-uniform noise levels on [t_min, t_max]."""
    return np.exp(rng.uniform(np.log(t_min), np.log(t_max), size=n))


@dataclass
class CDMDraws:
    t: np.ndarray  # (n,)
    z: np.ndarray  # (n, d)
    t_prime: np.ndarray  # (n,)
    rollout_noise: np.ndarray  # (M, k, n, d)


def sample_cdm_draws(
    rng: np.random.Generator,
    n: int,
    d: int,
    config: TrainConfig,
    schedule: NoiseSchedule,
    t: np.ndarray | None = None,
) -> CDMDraws:
    if t is None:
        t = sample_t(rng, n, config.t_min, schedule.sigma_max)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy()
    z = rng.standard_normal((n, d))
    lo = np.maximum(t - config.epsilon, schedule.sigma_min)
    t_prime = rng.uniform(lo, t)
    noise = rng.standard_normal((config.rollout_samples, config.k_rollout, n, d))
    return CDMDraws(t, z, t_prime, noise)


# --- losses ------------------------------------------------------------------


def loss_dsm(denoiser, x0, t, z, cond: Conditioning | None = None) -> LossResult:
    """Mean over rows of ||h(x0 + t z, t) - x0||^2."""
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    x_t = x0 + t[:, None] * z
    out, cache = _eval(denoiser, x_t, t, cond)
    r = out - x0
    value = float(np.sum(r * r) / n)
    _finite(value, "L_DSM", t, x_t)
    if cache is None:
        return LossResult(value, output=out)
    grads, inputs = denoiser.backward(cache, 2.0 * r / n)
    return LossResult(value, grads, {k: inputs[k] for k in ("mu", "speaker")}, out)


def _rollout(denoiser, x, t, t_prime, k, cond, noise, diffusion_scale=1.0, keep=False):
    """Uniform k-step Euler-Maruyama path from t to t_prime (per row)."""
    caches = []
    for j in range(k):
        t_cur = t + (j / k) * (t_prime - t)
        t_next = t + ((j + 1) / k) * (t_prime - t) if j < k - 1 else t_prime
        if keep:
            h, cache = denoiser.forward(x, t_cur, cond)
            caches.append((cache, t_cur, t_next))

            def _fixed(_x, _t, _c, _h=h):
                return _h

            x, _ = euler_maruyama_step(_fixed, x, t_cur, t_next, cond, noise[j], diffusion_scale)
        else:
            x, _ = euler_maruyama_step(denoiser, x, t_cur, t_next, cond, noise[j], diffusion_scale)
    return x, caches


def rollout_backward(
    denoiser,
    x_t,
    t,
    t_prime,
    k: int,
    cond: Conditioning | None = None,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
    diffusion_scale: float = 1.0,
    schedule: NoiseSchedule | None = None,
) -> np.ndarray:
    """Run the backward SDE from ``t`` to ``t_prime`` in ``k`` uniform steps.

    Noise comes from ``noise`` (shape ``(k, n, d)``) if given, else from ``rng``.
    ``diffusion_scale=0`` switches the Brownian term off.
    """
    schedule = schedule or NoiseSchedule()
    x_t = np.asarray(x_t, dtype=np.float64)
    n = x_t.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    t_prime = np.broadcast_to(np.asarray(t_prime, dtype=np.float64), (n,))
    if k < 1:
        raise ValueError("k must be >= 1")
    if np.any(t_prime >= t):
        raise ValueError("rollout requires t_prime < t")
    if np.any(t_prime < schedule.sigma_min * (1 - 1e-12)):
        raise ValueError(f"t_prime below sigma_min {schedule.sigma_min}")
    if noise is None:
        if rng is None:
            raise ValueError("either rng or noise is required")
        noise = rng.standard_normal((k,) + x_t.shape)
    return _rollout(denoiser, x_t, t, t_prime, k, cond, noise, diffusion_scale)[0]


def _cdm_forward(denoiser, x0, draws: CDMDraws, cond, keep: bool):
    x0 = np.asarray(x0, dtype=np.float64)
    n, d = x0.shape
    M, k = draws.rollout_noise.shape[:2]
    x_t = x0 + draws.t[:, None] * draws.z
    h_t, cache_t = _eval(denoiser, x_t, draws.t, cond)
    cond_m = cond.tile(M) if cond is not None else None
    xs = np.tile(x_t, (M, 1))
    ts = np.tile(draws.t, M)
    tps = np.tile(draws.t_prime, M)
    noise = draws.rollout_noise.transpose(1, 0, 2, 3).reshape(k, M * n, d)
    x_tp, path = _rollout(denoiser, xs, ts, tps, k, cond_m, noise, keep=keep)
    h_tp, cache_tp = _eval(denoiser, x_tp, tps, cond_m)
    target = h_tp.reshape(M, n, d).mean(0)
    return x_t, h_t, cache_t, target, cache_tp, path


def cdm_row_terms(denoiser, x0, draws: CDMDraws, cond: Conditioning | None = None) -> np.ndarray:
    """Per-row 0.5 ||mean_M h(x_t', t') - h(x_t, t)||^2 (values only)."""
    _, h_t, _, target, _, _ = _cdm_forward(_ValueOnly(denoiser), x0, draws, cond, keep=False)
    r = h_t - target
    return 0.5 * np.sum(r * r, axis=1)


class _ValueOnly:
    def __init__(self, denoiser):
        self._denoiser = denoiser

    def __call__(self, x, t, cond=None):
        return self._denoiser(x, t, cond)


def loss_cdm(
    denoiser,
    x0,
    draws: CDMDraws,
    config: TrainConfig,
    cond: Conditioning | None = None,
) -> LossResult:
    """Consistency loss: 0.5 ||mean_M h(x_t', t') - h(x_t, t)||^2, averaged over rows.

    Rows with ``t_prime == t`` get a zero-length rollout (x_t' = x_t exactly).
    With ``config.stop_gradient_rollout`` the rollout branch is a constant
    target; otherwise gradients flow through the final evaluation and every
    rollout step.
    """
    n = np.shape(x0)[0]
    full = _differentiable(denoiser) and not config.stop_gradient_rollout
    x_t, h_t, cache_t, target, cache_tp, path = _cdm_forward(denoiser, x0, draws, cond, full)
    r = h_t - target
    value = float(0.5 * np.sum(r * r) / n)
    _finite(value, "L_CDM", draws.t, x_t)
    if cache_t is None:
        return LossResult(value, output=h_t)

    grads, inputs = denoiser.backward(cache_t, r / n)
    inputs = {key: inputs[key] for key in ("mu", "speaker")}
    if full:
        M = draws.rollout_noise.shape[0]

        def fold(ig):
            return {key: ig[key].reshape(M, n, -1).sum(0) for key in ("mu", "speaker")}

        pg, ig = denoiser.backward(cache_tp, np.tile(-r / (n * M), (M, 1)))
        _add(grads, pg)
        _add(inputs, fold(ig))
        gx = ig["x"]
        for cache, t_cur, t_next in reversed(path):
            a = (2.0 * (t_cur - t_next) / t_cur)[:, None]
            pg, ig = denoiser.backward(cache, gx * a)
            _add(grads, pg)
            _add(inputs, fold(ig))
            gx = gx * (1.0 - a) + ig["x"]
    return LossResult(value, grads, inputs, h_t)


def loss_prior(mu_frames, x0_frames) -> tuple[float, np.ndarray]:
    """Elementwise MSE; returns the value and its gradient w.r.t. ``mu_frames``."""
    mu = np.asarray(mu_frames, dtype=np.float64)
    x0 = np.asarray(x0_frames, dtype=np.float64)
    if mu.shape != x0.shape:
        raise ValueError(f"shape mismatch: {mu.shape} vs {x0.shape}")
    r = mu - x0
    return float(np.mean(r * r)), 2.0 * r / r.size


def encode_durations(durations) -> np.ndarray:
    d = np.asarray(durations, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("durations must be positive")
    return np.log(d + 1.0)


def decode_durations(log_durations) -> np.ndarray:
    return np.maximum(np.rint(np.exp(np.asarray(log_durations)) - 1.0), 1).astype(int)


def loss_duration(pred_log_durations, true_durations) -> tuple[float, np.ndarray]:
    """MSE in the log(d + 1) domain; returns the value and its gradient."""
    pred = np.asarray(pred_log_durations, dtype=np.float64)
    target = encode_durations(true_durations)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    r = pred - target
    return float(np.mean(r * r)), 2.0 * r / r.size


def total_loss(parts: dict[str, float], lam: float) -> float:
    """L_duration + L_prior + L_DSM + lam * L_CDM; missing parts count as 0."""
    vals = {k: float(parts.get(k, 0.0)) for k in ("L_duration", "L_prior", "L_DSM", "L_CDM")}
    if not all(math.isfinite(v) for v in vals.values()):
        raise NumericError(f"non-finite loss component in {vals}")
    return vals["L_duration"] + vals["L_prior"] + vals["L_DSM"] + lam * vals["L_CDM"]


# --- toy training loop -------------------------------------------------------


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Independent stream for one optimizer step; makes resumption exact."""
    return np.random.default_rng([seed, step])


def history_row(step, parts: dict, lam: float, wall_ms: float) -> dict:
    row = {"step": step}
    for key in ("L_duration", "L_prior", "L_DSM", "L_CDM"):
        row[key] = parts.get(key)
    row["L_final"] = total_loss({k: v for k, v in parts.items() if v is not None}, lam)
    row["wall_ms"] = wall_ms
    return row


def toy_step(net, gmm: GaussianMixture, config: TrainConfig, schedule: NoiseSchedule, rng):
    """Loss parts and summed gradients for one batch of mixture data."""
    n = config.batch_size
    x0 = gmm_sample(gmm, rng, n)
    draws = sample_cdm_draws(rng, n, gmm.dim, config, schedule)
    dsm = loss_dsm(net, x0, draws.t, draws.z)
    parts = {"L_DSM": dsm.value, "L_CDM": None}
    grads = dict(dsm.grads)
    if config.lam > 0:
        cdm = loss_cdm(net, x0, draws, config)
        parts["L_CDM"] = cdm.value
        _add(grads, cdm.grads, config.lam)
    return parts, grads


def make_optimizer(config: TrainConfig) -> Adam:
    return Adam(config.lr, config.beta1, config.beta2, config.adam_eps)


def train(
    net,
    gmm: GaussianMixture,
    config: TrainConfig,
    schedule: NoiseSchedule | None = None,
    optimizer: Adam | None = None,
    start_step: int = 0,
    n_steps: int | None = None,
) -> tuple[Adam, list[dict]]:
    """Adam on L_DSM + lam * L_CDM with fresh mixture samples each step.

    Step ``i`` draws from ``step_rng(config.seed, i)``, so a run resumed from a
    checkpoint at ``start_step`` continues the uninterrupted run exactly.
    """
    schedule = schedule or NoiseSchedule()
    optimizer = optimizer or make_optimizer(config)
    end = config.n_steps if n_steps is None else start_step + n_steps
    history = []
    for step in range(start_step, end):
        t0 = time.perf_counter()
        snapshot = {k: v.copy() for k, v in net.params.items()}
        try:
            parts, grads = toy_step(net, gmm, config, schedule, step_rng(config.seed, step))
        except (NumericError, FloatingPointError) as exc:
            raise TrainingDiverged(f"step {step}: {exc}", step, snapshot, history) from exc
        optimizer.step(net.params, grads)
        history.append(history_row(step, parts, config.lam, (time.perf_counter() - t0) * 1e3))
    return optimizer, history
