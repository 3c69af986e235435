"""Run configuration, checkpoints and metric files.

All documents are JSON except time series, which are CSV. Floats are written
with Python's shortest round-trip repr, so a value read back is bit-identical
to the value written.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
import os
from dataclasses import fields
from pathlib import Path

import numpy as np

from .core import NoiseSchedule
from .drift import CompareSettings, default_gmm_2d
from .losses import HISTORY_COLUMNS, TrainConfig
from .samplers import SamplerParams
from .tts import CorpusConfig, SyntheticCorpus, TTSConfig, Utterance

CHECKPOINT_FORMAT = "cdm-checkpoint"
CHECKPOINT_VERSION = 1
CONFIG_SCHEMA = "cdm-run-config/1"
OUTPUT_DIR_ENV = "CDM_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


# --- configuration -----------------------------------------------------------


DENOISER_DEFAULTS = {"hidden": 128, "n_hidden": 2, "fourier_channels": 16, "seed": 0}
TTS_TRAIN_DEFAULTS = {"lr": 3e-4, "n_steps": 1500, "batch_size": 8}


def _dataclass_defaults(cls, **overrides) -> dict:
    inst = cls(**overrides)
    out = {f.name: getattr(inst, f.name) for f in fields(cls)}
    for k, v in out.items():
        if isinstance(v, tuple):
            out[k] = list(v)
    return out


def _train_defaults(**overrides) -> dict:
    d = _dataclass_defaults(TrainConfig, **overrides)
    d["lambda"] = d.pop("lam")
    return d


# vocabulary, speaker count and frame dim come from the corpus section
CORPUS_SIZED = ("n_tokens", "n_speakers", "dim")


def _tts_model_defaults() -> dict:
    d = _dataclass_defaults(TTSConfig)
    for k in CORPUS_SIZED:
        d.pop(k)
    return d


def default_config() -> dict:
    return {
        "schema": CONFIG_SCHEMA,
        "seed": 0,
        "output_dir": os.environ.get(OUTPUT_DIR_ENV, "runs"),
        "schedule": _dataclass_defaults(NoiseSchedule),
        "train": _train_defaults(),
        "tts_train": _train_defaults(**TTS_TRAIN_DEFAULTS),
        "sampler": _dataclass_defaults(SamplerParams),
        "denoiser": dict(DENOISER_DEFAULTS),
        "gmm": default_gmm_2d().to_spec(),
        "corpus": _dataclass_defaults(CorpusConfig),
        "tts_model": _tts_model_defaults(),
        "compare": _dataclass_defaults(CompareSettings),
    }


SEEDED_SECTIONS = ("train", "tts_train", "denoiser", "corpus", "tts_model")


def resolve_config(raw: dict | None = None) -> dict:
    """Merge ``raw`` over the defaults, rejecting unknown keys.

    A top-level ``seed`` propagates to every section seed not set explicitly.
    """
    raw = copy.deepcopy(raw or {})
    cfg = default_config()
    for key, value in raw.items():
        if key not in cfg:
            raise ConfigError(f"unknown config key {key!r}")
        if key == "gmm":
            if not isinstance(value, list) or not value:
                raise ConfigError("gmm must be a non-empty list of {weight, mean, var}")
            for comp in value:
                if set(comp) != {"weight", "mean", "var"}:
                    raise ConfigError(f"gmm component keys must be weight/mean/var, got {sorted(comp)}")
            cfg["gmm"] = value
        elif isinstance(cfg[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be an object")
            for sub in value:
                if sub not in cfg[key]:
                    raise ConfigError(f"unknown key {key}.{sub}")
            cfg[key].update(value)
        else:
            cfg[key] = value
    for section in SEEDED_SECTIONS:
        if "seed" not in raw.get(section, {}):
            cfg[section]["seed"] = cfg["seed"]
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict):
    try:
        build_schedule(cfg)
        build_train_config(cfg, "train")
        build_train_config(cfg, "tts_train")
        build_sampler(cfg)
        build_gmm(cfg)
        build_tts_config(cfg)
        build_compare(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | os.PathLike | None) -> dict:
    if path is None:
        return resolve_config({})
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    raw.pop("schema", None)
    return resolve_config(raw)


def _parse_scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, assignments) -> dict:
    """Apply ``section.key=value`` strings (values parsed as JSON when possible)."""
    raw = copy.deepcopy(cfg)
    for item in assignments or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        path, text = item.split("=", 1)
        parts = path.split(".")
        if len(parts) == 1:
            if parts[0] not in raw:
                raise ConfigError(f"unknown config key {parts[0]!r}")
            raw[parts[0]] = _parse_scalar(text)
        elif len(parts) == 2:
            section, key = parts
            if section not in raw or not isinstance(raw[section], dict) or key not in raw[section]:
                raise ConfigError(f"unknown config key {path!r}")
            raw[section][key] = _parse_scalar(text)
        else:
            raise ConfigError(f"override path too deep: {path!r}")
    raw.pop("schema", None)
    return resolve_config(raw)


def build_schedule(cfg) -> NoiseSchedule:
    return NoiseSchedule(**cfg["schedule"])


def build_train_config(cfg, section="train") -> TrainConfig:
    d = dict(cfg[section])
    d["lam"] = d.pop("lambda")
    return TrainConfig(**d)


def build_sampler(cfg) -> SamplerParams:
    return SamplerParams(**cfg["sampler"])


def build_gmm(cfg):
    from .gmm import GaussianMixture

    return GaussianMixture.from_spec(cfg["gmm"])


def build_corpus_config(cfg) -> CorpusConfig:
    return CorpusConfig(**cfg["corpus"])


def build_tts_config(cfg) -> TTSConfig:
    corpus = build_corpus_config(cfg)
    return TTSConfig(
        n_tokens=corpus.n_tokens, n_speakers=corpus.n_speakers, dim=corpus.dim, **cfg["tts_model"]
    )


def build_compare(cfg) -> CompareSettings:
    d = dict(cfg["compare"])
    d["t_grid"] = tuple(d["t_grid"])
    return CompareSettings(**d)


# --- checkpoints -------------------------------------------------------------


def _encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [float(x) for x in a.reshape(-1)]}


def _decode_array(obj: dict) -> np.ndarray:
    data = np.array(obj["data"], dtype=np.float64)
    shape = tuple(int(s) for s in obj["shape"])
    if data.size != math.prod(shape):
        raise CheckpointError(f"array data length {data.size} does not match shape {shape}")
    return data.reshape(shape)


def save_checkpoint(path, kind: str, config: dict, params: dict, optimizer_state: dict, step: int):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "step": int(step),
        "config": config,
        "params": {k: _encode_array(params[k]) for k in sorted(params)},
        "optimizer": {
            "t": int(optimizer_state["t"]),
            "m": {k: _encode_array(v) for k, v in sorted(optimizer_state["m"].items())},
            "v": {k: _encode_array(v) for k, v in sorted(optimizer_state["v"].items())},
        },
    }
    write_json(path, doc)


def load_checkpoint(path) -> dict:
    """Parse a checkpoint completely or raise ``CheckpointError``."""
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {path}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"checkpoint is corrupt: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {doc.get('version')!r} is not supported (expected {CHECKPOINT_VERSION})"
        )
    try:
        return {
            "kind": doc["kind"],
            "step": int(doc["step"]),
            "config": doc["config"],
            "params": {k: _decode_array(v) for k, v in doc["params"].items()},
            "optimizer": {
                "t": int(doc["optimizer"]["t"]),
                "m": {k: _decode_array(v) for k, v in doc["optimizer"]["m"].items()},
                "v": {k: _decode_array(v) for k, v in doc["optimizer"]["v"].items()},
            },
        }
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint is malformed: {exc!r}") from exc


# --- metric files ------------------------------------------------------------


def _atomic_write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_json(path, obj):
    _atomic_write(path, json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(row.get(c)) for c in columns])
    _atomic_write(path, buf.getvalue())


def flatten(obj, prefix="") -> dict:
    out = {}
    if isinstance(obj, dict):
        for k in sorted(obj):
            out.update(flatten(obj[k], f"{prefix}{k}."))
    elif isinstance(obj, (list, tuple)):
        out[prefix[:-1]] = json.dumps(list(obj))
    else:
        out[prefix[:-1]] = obj
    return out


def report_rows(report: dict) -> tuple[list[str], list[dict]]:
    """Flatten a drift/compare report into one row per (seed, arm)."""
    rows = []
    if "per_seed" in report:
        for seed in sorted(report["per_seed"], key=int):
            for arm in sorted(report["per_seed"][seed]):
                row = {"seed": int(seed), "arm": arm}
                row.update(flatten(report["per_seed"][seed][arm]))
                rows.append(row)
    else:
        rows.append(flatten({k: v for k, v in report.items() if k != "schema"}))
    columns = sorted({c for r in rows for c in r}, key=lambda c: ({"seed": 0, "arm": 1}.get(c, 2), c))
    return columns, rows


def export_metrics(obj, path, fmt: str):
    """Write a loss history (list of rows) or a report (dict) as CSV or JSON."""
    if fmt not in ("csv", "json"):
        raise ValueError(f"format must be csv or json, got {fmt!r}")
    if isinstance(obj, list):
        if fmt == "csv":
            write_csv(path, HISTORY_COLUMNS, obj)
        else:
            write_json(path, {"schema": "cdm-history/1", "columns": list(HISTORY_COLUMNS), "rows": obj})
    else:
        if fmt == "csv":
            columns, rows = report_rows(obj)
            write_csv(path, columns, rows)
        else:
            write_json(path, obj)


def read_history_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for raw in csv.DictReader(fh):
            row = {}
            for k, v in raw.items():
                if v == "":
                    row[k] = None
                elif k == "step":
                    row[k] = int(v)
                else:
                    row[k] = float(v)
            rows.append(row)
    return rows


def metrics_digest(path, exclude=("wall_ms",)) -> str:
    """SHA-256 of a metric file with timing columns removed (CSV only)."""
    path = Path(path)
    if path.suffix != ".csv":
        return hashlib.sha256(path.read_bytes()).hexdigest()
    with open(path, newline="") as fh:
        table = list(csv.reader(fh))
    keep = [i for i, c in enumerate(table[0]) if c not in exclude] if table else []
    h = hashlib.sha256()
    for row in table:
        h.update(("\x1f".join(row[i] for i in keep) + "\n").encode())
    return h.hexdigest()


# --- corpus ------------------------------------------------------------------


def save_corpus(path, corpus: SyntheticCorpus):
    write_json(path, {"schema": "cdm-corpus/1", **corpus.to_dict()})


def load_corpus(path) -> SyntheticCorpus:
    doc = json.loads(Path(path).read_text())
    doc.pop("schema", None)
    return SyntheticCorpus.from_dict(doc)


def export_utterance_frames(utt: Utterance, path):
    """One row per frame: index, token id, then the d channels."""
    token_of_frame = np.repeat(utt.token_ids, utt.durations)
    cols = ["frame", "token"] + [f"c{j}" for j in range(utt.frames.shape[1])]
    rows = [
        dict(zip(cols, [i, int(tok)] + list(f)))
        for i, (tok, f) in enumerate(zip(token_of_frame, utt.frames.tolist()))
    ]
    write_csv(path, cols, rows)
