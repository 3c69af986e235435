"""Miniature multi-speaker acoustic model on a synthetic corpus.

Tokens and speaker ids are embedded, a prior encoder maps them to token-level
means ``mu`` with as many channels as the target frames, a duration predictor
(on detached token embeddings) predicts ``log(d + 1)``, a length regulator
expands ``mu`` to frames, and the conditional denoiser recovers frames from
noise. Training uses ground-truth durations; synthesis uses predicted ones.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import NoiseSchedule
from .losses import (
    NumericError,
    TrainConfig,
    TrainingDiverged,
    _add,
    decode_durations,
    history_row,
    loss_cdm,
    loss_dsm,
    loss_duration,
    loss_prior,
    make_optimizer,
    sample_cdm_draws,
    step_rng,
)
from .nn import MLP, Adam, Conditioning, DenoiserConfig, DenoiserNet
from .samplers import SamplerParams, stochastic_heun_sample


# --- corpus ------------------------------------------------------------------


@dataclass
class CorpusConfig:
    n_tokens: int = 16
    n_speakers: int = 8
    dim: int = 16
    utterances_per_speaker: int = 16
    min_len: int = 4
    max_len: int = 10
    jitter: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("n_tokens", "n_speakers", "dim", "utterances_per_speaker", "min_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.max_len < self.min_len:
            raise ValueError("max_len must be >= min_len")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Utterance:
    token_ids: np.ndarray
    speaker_id: int
    durations: np.ndarray
    frames: np.ndarray

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.durations = np.asarray(self.durations, dtype=np.int64)
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if len(self.token_ids) != len(self.durations):
            raise ValueError("one duration per token is required")
        if np.any(self.durations < 1):
            raise ValueError("durations must be >= 1")
        if self.frames.shape[0] != int(self.durations.sum()):
            raise ValueError("frame count must equal the sum of durations")

    def to_dict(self) -> dict:
        return {
            "token_ids": self.token_ids.tolist(),
            "speaker_id": int(self.speaker_id),
            "durations": self.durations.tolist(),
            "frames": self.frames.tolist(),
        }


@dataclass
class SyntheticCorpus:
    config: CorpusConfig
    base_pattern: np.ndarray  # (V, d)
    speaker_scale: np.ndarray  # (S, d)
    speaker_bias: np.ndarray  # (S, d)
    utterances: list[Utterance] = field(default_factory=list)

    def prototype(self, token, speaker) -> np.ndarray:
        return self.base_pattern[token] * self.speaker_scale[speaker] + self.speaker_bias[speaker]

    def prototypes(self, speaker) -> np.ndarray:
        """Noise-free frame for every token of one speaker, shape (V, d)."""
        return self.base_pattern * self.speaker_scale[speaker] + self.speaker_bias[speaker]

    def frame_variance(self) -> float:
        return float(np.var(np.concatenate([u.frames for u in self.utterances])))

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "base_pattern": self.base_pattern.tolist(),
            "speaker_scale": self.speaker_scale.tolist(),
            "speaker_bias": self.speaker_bias.tolist(),
            "utterances": [u.to_dict() for u in self.utterances],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticCorpus":
        utts = [
            Utterance(u["token_ids"], int(u["speaker_id"]), u["durations"], u["frames"])
            for u in data["utterances"]
        ]
        return cls(
            CorpusConfig(**data["config"]),
            np.array(data["base_pattern"], dtype=np.float64),
            np.array(data["speaker_scale"], dtype=np.float64),
            np.array(data["speaker_bias"], dtype=np.float64),
            utts,
        )


def true_duration(token: int, speaker: int) -> int:
    return 2 + (token + speaker) % 5


def base_pattern(n_tokens: int, dim: int) -> np.ndarray:
    v = np.arange(1, n_tokens + 1)[:, None]
    c = np.arange(1, dim + 1)[None, :]
    return np.sin(np.pi * v * c / (dim + 1))


def generate_corpus(config: CorpusConfig) -> SyntheticCorpus:
    rng = np.random.default_rng(config.seed)
    V, S, d = config.n_tokens, config.n_speakers, config.dim
    scale = rng.uniform(0.5, 1.5, size=(S, d))
    bias = rng.uniform(-0.3, 0.3, size=(S, d))
    corpus = SyntheticCorpus(config, base_pattern(V, d), scale, bias)
    for s in range(S):
        for _ in range(config.utterances_per_speaker):
            n = int(rng.integers(config.min_len, config.max_len + 1))
            tokens = rng.integers(0, V, size=n)
            durs = np.array([true_duration(int(v), s) for v in tokens])
            proto = np.repeat(corpus.prototype(tokens, s), durs, axis=0)
            frames = proto + config.jitter * rng.standard_normal(proto.shape)
            corpus.utterances.append(Utterance(tokens, s, durs, frames))
    return corpus


def length_regulate(token_values, durations) -> np.ndarray:
    durations = np.asarray(durations)
    if len(durations) != len(token_values):
        raise ValueError("one duration per token is required")
    if np.any(durations < 1):
        raise ValueError("durations must be >= 1")
    return np.repeat(np.asarray(token_values), durations, axis=0)


# --- model -------------------------------------------------------------------


@dataclass
class TTSConfig:
    n_tokens: int = 16
    n_speakers: int = 8
    dim: int = 16
    token_dim: int = 16
    speaker_dim: int = 16
    encoder_hidden: int = 64
    duration_hidden: int = 32
    decoder_hidden: int = 128
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class SpeakerTable:
    def __init__(self, n_speakers: int, dim: int, rng: np.random.Generator):
        self.params = {"emb": 0.5 * rng.standard_normal((n_speakers, dim))}

    def lookup(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        n = self.params["emb"].shape[0]
        if np.any(ids < 0) or np.any(ids >= n):
            raise IndexError(f"speaker id out of range [0, {n})")
        return self.params["emb"][ids]


class PriorEncoder:
    """Token embedding table plus an MLP on ``[token_emb, speaker_emb]`` -> mu."""

    def __init__(self, cfg: TTSConfig, rng: np.random.Generator):
        self.embed = {"tok": rng.standard_normal((cfg.n_tokens, cfg.token_dim))}
        self.mlp = MLP([cfg.token_dim + cfg.speaker_dim, cfg.encoder_hidden, cfg.dim], rng)
        self.params = {"tok": self.embed["tok"], **{f"mlp.{k}": v for k, v in self.mlp.params.items()}}

    def token_embedding(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        n = self.embed["tok"].shape[0]
        if np.any(ids < 0) or np.any(ids >= n):
            raise IndexError(f"token id out of range [0, {n})")
        return self.embed["tok"][ids]

    def forward(self, token_ids, speaker_emb):
        emb = self.token_embedding(token_ids)
        mu, cache = self.mlp.forward(np.concatenate([emb, speaker_emb], axis=1))
        return mu, (cache, np.asarray(token_ids), emb.shape[1])

    def backward(self, cache, g_mu):
        mlp_cache, ids, td = cache
        g, g_in = self.mlp.backward(mlp_cache, g_mu)
        grads = {f"mlp.{k}": v for k, v in g.items()}
        g_tok = np.zeros_like(self.embed["tok"])
        np.add.at(g_tok, ids, g_in[:, :td])
        grads["tok"] = g_tok
        return grads, g_in[:, td:]


class DurationPredictor:
    def __init__(self, cfg: TTSConfig, rng: np.random.Generator):
        self.mlp = MLP([cfg.token_dim + cfg.speaker_dim, cfg.duration_hidden, 1], rng)
        self.params = self.mlp.params

    def forward(self, token_emb, speaker_emb):
        # token embeddings arrive detached: no gradient is returned for them
        y, cache = self.mlp.forward(np.concatenate([token_emb, speaker_emb], axis=1))
        return y[:, 0], (cache, token_emb.shape[1])

    def backward(self, cache, g_y):
        mlp_cache, td = cache
        grads, g_in = self.mlp.backward(mlp_cache, g_y[:, None])
        return grads, g_in[:, td:]


class TTSModel:
    def __init__(self, cfg: TTSConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.speakers = SpeakerTable(cfg.n_speakers, cfg.speaker_dim, rng)
        self.encoder = PriorEncoder(cfg, rng)
        self.duration = DurationPredictor(cfg, rng)
        self.decoder = DenoiserNet(
            DenoiserConfig(
                dim=cfg.dim,
                speaker_dim=cfg.speaker_dim,
                hidden=cfg.decoder_hidden,
                seed=int(rng.integers(2**31)),
            )
        )

    @property
    def modules(self) -> dict:
        return {
            "speakers": self.speakers,
            "encoder": self.encoder,
            "duration": self.duration,
            "decoder": self.decoder,
        }

    def named_params(self) -> dict[str, np.ndarray]:
        """Flat view; arrays are shared with the modules, so in-place updates apply."""
        return {f"{m}.{k}": v for m, mod in self.modules.items() for k, v in mod.params.items()}

    def encode_prior(self, token_ids, speaker_id) -> np.ndarray:
        token_ids = np.asarray(token_ids)
        spk = self.speakers.lookup(np.full(len(token_ids), speaker_id))
        return self.encoder.forward(token_ids, spk)[0]

    def predict_log_durations(self, token_ids, speaker_id) -> np.ndarray:
        token_ids = np.asarray(token_ids)
        spk = self.speakers.lookup(np.full(len(token_ids), speaker_id))
        return self.duration.forward(self.encoder.token_embedding(token_ids), spk)[0]


def encode_prior(model: TTSModel, token_ids, speaker_id) -> np.ndarray:
    return model.encode_prior(token_ids, speaker_id)


# --- training ----------------------------------------------------------------


@dataclass
class Batch:
    tokens: np.ndarray  # (T,)
    token_speaker: np.ndarray  # (T,)
    durations: np.ndarray  # (T,)
    frames: np.ndarray  # (F, d)
    frame_token: np.ndarray  # (F,) index into the token axis
    frame_speaker: np.ndarray  # (F,)


def make_batch(utterances: list[Utterance]) -> Batch:
    tokens = np.concatenate([u.token_ids for u in utterances])
    tok_spk = np.concatenate([np.full(len(u.token_ids), u.speaker_id) for u in utterances])
    durs = np.concatenate([u.durations for u in utterances])
    frame_token = length_regulate(np.arange(len(tokens)), durs)
    return Batch(
        tokens,
        tok_spk,
        durs,
        np.concatenate([u.frames for u in utterances]),
        frame_token,
        tok_spk[frame_token],
    )


def tts_losses(model: TTSModel, batch: Batch, config: TrainConfig, schedule: NoiseSchedule, rng):
    """Loss parts and gradients of the combined objective for one batch."""
    spk_tok = model.speakers.lookup(batch.token_speaker)
    mu_tok, enc_cache = model.encoder.forward(batch.tokens, spk_tok)
    log_dur, dur_cache = model.duration.forward(
        model.encoder.token_embedding(batch.tokens).copy(), spk_tok
    )
    mu = mu_tok[batch.frame_token]
    spk_frames = spk_tok[batch.frame_token]
    cond = Conditioning(mu, spk_frames)
    x0 = batch.frames
    n, d = x0.shape

    l_dur, g_logdur = loss_duration(log_dur, batch.durations)
    l_prior, g_mu = loss_prior(mu, x0)
    draws = sample_cdm_draws(rng, n, d, config, schedule)
    dsm = loss_dsm(model.decoder, x0, draws.t, draws.z, cond)
    parts = {"L_duration": l_dur, "L_prior": l_prior, "L_DSM": dsm.value, "L_CDM": None}
    dec_grads = dict(dsm.grads)
    g_mu = g_mu + dsm.input_grads["mu"]
    g_spk_frames = dsm.input_grads["speaker"].copy()
    if config.lam > 0:
        cdm = loss_cdm(model.decoder, x0, draws, config, cond)
        parts["L_CDM"] = cdm.value
        _add(dec_grads, cdm.grads, config.lam)
        g_mu = g_mu + config.lam * cdm.input_grads["mu"]
        g_spk_frames += config.lam * cdm.input_grads["speaker"]

    # frames -> tokens: transpose of the length regulator
    T = len(batch.tokens)
    g_mu_tok = np.zeros((T, d))
    np.add.at(g_mu_tok, batch.frame_token, g_mu)
    g_spk_tok = np.zeros((T, spk_tok.shape[1]))
    np.add.at(g_spk_tok, batch.frame_token, g_spk_frames)

    enc_grads, g_spk_enc = model.encoder.backward(enc_cache, g_mu_tok)
    dur_grads, g_spk_dur = model.duration.backward(dur_cache, g_logdur)
    g_spk_tok += g_spk_enc + g_spk_dur
    g_table = np.zeros_like(model.speakers.params["emb"])
    np.add.at(g_table, batch.token_speaker, g_spk_tok)

    grads = {"speakers.emb": g_table}
    grads.update({f"encoder.{k}": v for k, v in enc_grads.items()})
    grads.update({f"duration.{k}": v for k, v in dur_grads.items()})
    grads.update({f"decoder.{k}": v for k, v in dec_grads.items()})
    return parts, grads


def train_tts(
    model: TTSModel,
    corpus: SyntheticCorpus,
    config: TrainConfig,
    schedule: NoiseSchedule | None = None,
    optimizer: Adam | None = None,
    start_step: int = 0,
    n_steps: int | None = None,
) -> tuple[Adam, list[dict]]:
    """Joint training of all four parts; ``config.batch_size`` counts utterances."""
    if not corpus.utterances:
        raise ValueError("corpus is empty")
    schedule = schedule or NoiseSchedule()
    optimizer = optimizer or make_optimizer(config)
    params = model.named_params()
    end = config.n_steps if n_steps is None else start_step + n_steps
    history = []
    for step in range(start_step, end):
        t0 = time.perf_counter()
        rng = step_rng(config.seed, step)
        pick = rng.choice(len(corpus.utterances), size=min(config.batch_size, len(corpus.utterances)), replace=False)
        batch = make_batch([corpus.utterances[i] for i in sorted(pick)])
        snapshot = {k: v.copy() for k, v in params.items()}
        try:
            parts, grads = tts_losses(model, batch, config, schedule, rng)
        except (NumericError, FloatingPointError) as exc:
            raise TrainingDiverged(f"step {step}: {exc}", step, snapshot, history) from exc
        optimizer.step(params, grads)
        history.append(history_row(step, parts, config.lam, (time.perf_counter() - t0) * 1e3))
    return optimizer, history


def default_tts_train_config(**overrides) -> TrainConfig:
    base = dict(lr=3e-4, n_steps=1500, batch_size=8)
    base.update(overrides)
    return TrainConfig(**base)


# --- inference ---------------------------------------------------------------


def synthesize(
    model: TTSModel,
    token_ids,
    speaker_id: int,
    params: SamplerParams,
    rng: np.random.Generator,
    return_durations: bool = False,
):
    token_ids = np.asarray(token_ids)
    if token_ids.size == 0:
        raise ValueError("empty token sequence")
    durs = decode_durations(model.predict_log_durations(token_ids, speaker_id))
    mu = length_regulate(model.encode_prior(token_ids, speaker_id), durs)
    spk = model.speakers.lookup(np.full(len(mu), speaker_id))
    frames = stochastic_heun_sample(model.decoder, Conditioning(mu, spk), params, rng)
    return (frames, durs) if return_durations else frames


def speaker_identification(model: TTSModel, corpus: SyntheticCorpus, params: SamplerParams, seed=0):
    """For each speaker, synthesize every token once and pick the best-correlated speaker.

    Frames are averaged per token segment (predicted durations) and the
    resulting (V, d) matrix is correlated with each speaker's prototypes.
    Returns the list of predicted speaker ids (index = true speaker).
    """
    V = corpus.config.n_tokens
    tokens = np.arange(V)
    predicted = []
    for s in range(corpus.config.n_speakers):
        frames, durs = synthesize(
            model, tokens, s, params, np.random.default_rng([seed, s]), return_durations=True
        )
        seg = np.repeat(np.arange(V), durs)
        means = np.stack([frames[seg == v].mean(0) for v in range(V)])
        corr = [
            np.corrcoef(means.ravel(), corpus.prototypes(s2).ravel())[0, 1]
            for s2 in range(corpus.config.n_speakers)
        ]
        predicted.append(int(np.argmax(corr)))
    return predicted
