"""Isotropic Gaussian mixtures with closed-form diffused marginals.

Under x_t = x_0 + t z the marginal of a mixture is again a mixture with the
same weights and means and each variance inflated by t^2, so the score and
the posterior mean E[x_0 | x_t] are available exactly. These serve as the
ground truth for every numerical check in the package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .core import _check_t

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    variances: np.ndarray  # (K,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        m = np.asarray(self.means, dtype=np.float64)
        if m.ndim == 1:
            m = m[:, None]
        v = np.asarray(self.variances, dtype=np.float64).reshape(-1)
        if not (len(w) == len(m) == len(v)) or len(w) == 0:
            raise ValueError("weights, means and variances must have equal nonzero length")
        if np.any(w <= 0):
            raise ValueError("mixture weights must be strictly positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {w.sum()!r}, expected 1")
        if np.any(v <= 0) or not np.all(np.isfinite(v)):
            raise ValueError("component variances must be positive and finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        mu = self.mean()
        dev = self.means - mu
        cov = (self.weights[:, None] * dev).T @ dev
        return cov + np.eye(self.dim) * float(self.weights @ self.variances)

    @classmethod
    def from_spec(cls, components) -> "GaussianMixture":
        """Build from a list of ``{"weight", "mean", "var"}`` records."""
        w = [float(c["weight"]) for c in components]
        m = [np.atleast_1d(np.asarray(c["mean"], dtype=np.float64)) for c in components]
        v = [float(c["var"]) for c in components]
        if len({len(x) for x in m}) != 1:
            raise ValueError("all component means must share one dimension")
        return cls(np.array(w), np.stack(m), np.array(v))

    def to_spec(self) -> list[dict]:
        return [
            {"weight": float(w), "mean": [float(a) for a in m], "var": float(v)}
            for w, m, v in zip(self.weights, self.means, self.variances)
        ]

    def as_denoiser(self):
        """Callable with the ``(x, sigma, cond)`` denoiser signature."""

        def denoise(x, sigma, cond=None):
            return exact_denoiser(self, x, sigma)

        return denoise


def marginal_at(gmm: GaussianMixture, t) -> GaussianMixture:
    t = float(_check_t(t, strict=False))
    return GaussianMixture(gmm.weights, gmm.means, gmm.variances + t * t)


def _log_components(gmm: GaussianMixture, x: np.ndarray, var: np.ndarray) -> np.ndarray:
    """log w_k + log N(x; m_k, var_k I); var broadcasts as (K,) or (n, K)."""
    d = gmm.dim
    sq = ((x[..., None, :] - gmm.means) ** 2).sum(-1)  # (n, K)
    return np.log(gmm.weights) - 0.5 * (d * (_LOG_2PI + np.log(var)) + sq / var)


def _posterior(gmm: GaussianMixture, x, t):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != gmm.dim:
        raise ValueError(f"expected trailing dimension {gmm.dim}, got {x.shape}")
    t = _check_t(t, strict=False)
    s2 = (t * t)[..., None] if t.ndim else t * t  # (n, 1) or scalar
    var = gmm.variances + s2  # (n, K) or (K,)
    logp = _log_components(gmm, x, var)
    resp = np.exp(logp - logsumexp(logp, axis=-1, keepdims=True))
    return x, s2, var, resp


def exact_score(gmm: GaussianMixture, x, t) -> np.ndarray:
    x, _, var, resp = _posterior(gmm, x, t)
    coef = resp / var  # (n, K)
    return coef @ gmm.means - coef.sum(-1, keepdims=True) * x


def exact_denoiser(gmm: GaussianMixture, x, t) -> np.ndarray:
    x, s2, var, resp = _posterior(gmm, x, t)
    # each component's posterior mean is (s2 * m_k + v_k * x) / (v_k + s2)
    a = resp * s2 / var  # weight on the component mean
    b = (resp * gmm.variances / var).sum(-1, keepdims=True)  # weight on x
    return a @ gmm.means + b * x


def log_density(gmm: GaussianMixture, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return logsumexp(_log_components(gmm, x, gmm.variances), axis=-1)


def sample(gmm: GaussianMixture, rng: np.random.Generator, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    comp = rng.choice(gmm.n_components, size=n, p=gmm.weights)
    z = rng.standard_normal((n, gmm.dim))
    return gmm.means[comp] + np.sqrt(gmm.variances[comp])[:, None] * z
