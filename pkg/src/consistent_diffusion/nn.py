"""Small fully-connected networks with hand-written reverse mode.

Parameters live in plain ``dict[str, np.ndarray]`` so that checkpoints,
optimizer state and gradient checks can address them by name. Every forward
returns ``(output, cache)`` and every backward consumes that cache.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def silu(z):
    return z / (1.0 + np.exp(-z))


def silu_grad(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


class MLP:
    """Dense layers ``W{i}, b{i}`` with SiLU between them and a linear head."""

    def __init__(self, sizes, rng: np.random.Generator | None = None, zero_head: bool = True):
        self.sizes = [int(s) for s in sizes]
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output size")
        self.params: dict[str, np.ndarray] = {}
        rng = rng if rng is not None else np.random.default_rng(0)
        n = len(self.sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            if i == n - 1 and zero_head:
                W = np.zeros((fan_in, fan_out))
            else:
                bound = np.sqrt(3.0 / fan_in)
                W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.params[f"W{i}"] = W
            self.params[f"b{i}"] = np.zeros(fan_out)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def forward(self, x: np.ndarray):
        acts = [x]
        pre = []
        h = x
        for i in range(self.n_layers):
            z = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if i < self.n_layers - 1:
                pre.append(z)
                h = silu(z)
                acts.append(h)
            else:
                h = z
        return h, (acts, pre)

    def backward(self, cache, g_out: np.ndarray):
        """Returns ``(param_grads, input_grad)``; batch rows are summed."""
        acts, pre = cache
        grads = {}
        g = g_out
        for i in reversed(range(self.n_layers)):
            grads[f"W{i}"] = acts[i].T @ g
            grads[f"b{i}"] = g.sum(0)
            g = g @ self.params[f"W{i}"].T
            if i > 0:
                g = g * silu_grad(pre[i - 1])
        return grads, g

    def __call__(self, x):
        return self.forward(x)[0]


@dataclass
class Conditioning:
    """Per-row conditioning: frame-level prior mean and speaker embedding.

    Either field may be ``None``, meaning the zero vector.
    """

    mu: np.ndarray | None = None
    speaker: np.ndarray | None = None

    def take(self, idx) -> "Conditioning":
        return Conditioning(
            None if self.mu is None else self.mu[idx],
            None if self.speaker is None else self.speaker[idx],
        )

    def tile(self, reps: int) -> "Conditioning":
        def _t(a):
            return None if a is None else np.tile(a, (reps, 1))

        return Conditioning(_t(self.mu), _t(self.speaker))


def fourier_frequencies(n_channels: int = 16) -> np.ndarray:
    if n_channels % 2:
        raise ValueError("fourier channel count must be even")
    return np.geomspace(1.0 / 16.0, 4.0, n_channels // 2)


@dataclass
class DenoiserConfig:
    dim: int
    speaker_dim: int = 16
    hidden: int = 128
    n_hidden: int = 2
    fourier_channels: int = 16
    seed: int = 0

    @property
    def input_dim(self) -> int:
        return 2 * self.dim + self.fourier_channels + self.speaker_dim


@dataclass
class DenoiserNet:
    """x0-predicting denoiser ``h(x_t, sigma, cond)``.

    Input features are ``[x / sqrt(1 + sigma^2), fourier(log sigma), mu, speaker]``.
    """

    config: DenoiserConfig
    zero_head: bool = True
    mlp: MLP = field(init=False)
    fourier_freqs: np.ndarray = field(init=False)

    def __post_init__(self):
        c = self.config
        rng = np.random.default_rng(c.seed)
        sizes = [c.input_dim] + [c.hidden] * c.n_hidden + [c.dim]
        self.mlp = MLP(sizes, rng, zero_head=self.zero_head)
        self.fourier_freqs = fourier_frequencies(c.fourier_channels)

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.mlp.params

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def _features(self, x, sigma, cond: Conditioning | None):
        c = self.config
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != c.dim:
            raise ValueError(f"expected x of shape (n, {c.dim}), got {x.shape}")
        n = x.shape[0]
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,))
        if np.any(sigma <= 0):
            raise ValueError("sigma must be > 0")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(sigma))):
            raise FloatingPointError("non-finite denoiser input")
        cond = cond or Conditioning()
        mu = np.zeros((n, c.dim)) if cond.mu is None else np.asarray(cond.mu, dtype=np.float64)
        spk = (
            np.zeros((n, c.speaker_dim))
            if cond.speaker is None
            else np.asarray(cond.speaker, dtype=np.float64)
        )
        if mu.shape != (n, c.dim) or spk.shape != (n, c.speaker_dim):
            raise ValueError(
                f"conditioning shapes {mu.shape}, {spk.shape} do not match "
                f"({n}, {c.dim}), ({n}, {c.speaker_dim})"
            )
        c_in = 1.0 / np.sqrt(1.0 + sigma * sigma)
        angle = 2.0 * np.pi * np.outer(np.log(sigma) / 4.0, self.fourier_freqs)
        feats = np.concatenate(
            [x * c_in[:, None], np.cos(angle), np.sin(angle), mu, spk], axis=1
        )
        return feats, c_in

    def forward(self, x, sigma, cond: Conditioning | None = None):
        feats, c_in = self._features(x, sigma, cond)
        out, mlp_cache = self.mlp.forward(feats)
        return out, (mlp_cache, c_in)

    def backward(self, cache, g_out):
        """Returns ``(param_grads, input_grads)`` with input grads for x, mu, speaker."""
        mlp_cache, c_in = cache
        grads, g_feat = self.mlp.backward(mlp_cache, g_out)
        d, f = self.config.dim, self.config.fourier_channels
        inputs = {
            "x": g_feat[:, :d] * c_in[:, None],
            "mu": g_feat[:, d + f : 2 * d + f],
            "speaker": g_feat[:, 2 * d + f :],
        }
        return grads, inputs

    def __call__(self, x, sigma, cond: Conditioning | None = None):
        return self.forward(x, sigma, cond)[0]


class Adam:
    """Adaptive-moment optimizer over a dict of named arrays (updated in place)."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name in sorted(grads):
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])
        self.m = {k: np.array(v, dtype=np.float64) for k, v in state["m"].items()}
        self.v = {k: np.array(v, dtype=np.float64) for k, v in state["v"].items()}


@dataclass
class GradcheckReport:
    max_rel_error: float
    n_checked: int
    passed: bool
    worst: str = ""


def gradcheck(
    loss_and_grad,
    params: dict[str, np.ndarray],
    tol: float = 1e-4,
    n_probe: int = 200,
    step: float = 1e-5,
    rng: np.random.Generator | None = None,
    floor: float = 1e-7,
) -> GradcheckReport:
    """Compare analytic gradients with central differences.

    ``loss_and_grad()`` must evaluate a scalar loss at the current contents of
    ``params`` and return ``(loss, grads)``. Up to ``n_probe`` scalar entries
    are drawn at random across all arrays (all entries if there are fewer).
    The relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    _, grads = loss_and_grad()
    grads = {k: np.array(v, copy=True) for k, v in grads.items()}
    index = [(name, i) for name in sorted(params) for i in range(params[name].size)]
    if len(index) > n_probe:
        picks = rng.choice(len(index), size=n_probe, replace=False)
        index = [index[j] for j in sorted(picks)]
    worst, worst_name = 0.0, ""
    for name, i in index:
        flat = params[name].reshape(-1)
        orig = flat[i]
        flat[i] = orig + step
        lp, _ = loss_and_grad()
        flat[i] = orig - step
        lm, _ = loss_and_grad()
        flat[i] = orig
        numeric = (lp - lm) / (2.0 * step)
        analytic = grads[name].reshape(-1)[i] if name in grads else 0.0
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        if rel > worst or not np.isfinite(rel):
            worst, worst_name = rel, f"{name}[{i}]"
    return GradcheckReport(float(worst), len(index), bool(worst < tol), worst_name)
