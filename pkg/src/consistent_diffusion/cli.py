"""Command-line entry point: ``cdm <subcommand> [options]``.

Exit codes: 0 success, 1 a check failed or a run could not complete,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as cio
from .drift import REPORT_SCHEMA, compare_cdm_vs_dsm, distribution_distance, evaluate_denoiser
from .gmm import GaussianMixture, exact_denoiser, exact_score, log_density, marginal_at
from .gmm import sample as gmm_sample
from .losses import TrainingDiverged, loss_cdm, loss_dsm, sample_cdm_draws, total_loss, train
from .nn import Adam, Conditioning, DenoiserConfig, DenoiserNet, gradcheck
from .samplers import stochastic_heun_sample
from .tts import (
    TTSModel,
    generate_corpus,
    make_batch,
    synthesize,
    train_tts,
    tts_losses,
)


class UsageError(Exception):
    pass


# --- argument parsing --------------------------------------------------------

SAMPLER_FLAGS = {
    "sampler_steps": ("n_steps", int),
    "s_churn": ("s_churn", float),
    "s_min": ("s_min", float),
    "s_max": ("s_max", float),
    "s_noise": ("s_noise", float),
    "rho": ("rho", float),
    "sigma_lo": ("sigma_lo", float),
    "sigma_hi": ("sigma_hi", float),
    "prior_center": ("prior_center", str),
}

TRAIN_FLAGS = {
    "steps": ("n_steps", int),
    "lam": ("lambda", float),
    "lr": ("lr", float),
    "batch_size": ("batch_size", int),
    "epsilon": ("epsilon", float),
    "k_rollout": ("k_rollout", int),
    "rollout_samples": ("rollout_samples", int),
}


def _common_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="JSON run configuration")
    g.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    g.add_argument("--seed", type=int, help="top-level seed")
    g.add_argument("--out", help=f"output directory (default: config output_dir, ${cio.OUTPUT_DIR_ENV} or ./runs)")
    s = p.add_argument_group("sampler")
    for flag, (_, typ) in SAMPLER_FLAGS.items():
        s.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ)
    t = p.add_argument_group("training")
    for flag, (_, typ) in TRAIN_FLAGS.items():
        name = "lambda" if flag == "lam" else flag.replace("_", "-")
        t.add_argument("--" + name, dest=flag, type=typ)
    t.add_argument("--stop-gradient", dest="stop_gradient", action="store_true", default=None,
                   help="detach the rollout target")
    t.add_argument("--full-backprop", dest="stop_gradient", action="store_false",
                   help="differentiate through the rollout target")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="cdm", description="Consistency-regularized diffusion toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("oracle-check", parents=[common], help="verify the exact mixture oracle")
    p.add_argument("--tol", type=float, default=1e-10)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--tol", type=float, default=1e-4)

    for name, helptext in (("train-toy", "train a denoiser on the mixture"),
                           ("train-tts", "train the synthetic TTS model")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("sample", parents=[common], help="sample from a toy checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=4000)

    p = sub.add_parser("synth", parents=[common], help="synthesize frames from a TTS checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokens", required=True, help="comma-separated token ids")
    p.add_argument("--speaker", type=int, required=True)

    p = sub.add_parser("eval-drift", parents=[common], help="drift metrics for one denoiser")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--oracle", action="store_true", help="use the exact mixture denoiser")

    p = sub.add_parser("compare", parents=[common], help="paired lambda>0 vs lambda=0 experiment")
    p.add_argument("--seeds", default="5", help="count N (seeds 0..N-1) or comma-separated list")
    p.add_argument("--oracle", action="store_true", help="null test with the exact denoiser in both arms")
    return parser


def parse_seeds(text: str) -> list[int]:
    try:
        if "," in text:
            seeds = [int(s) for s in text.split(",") if s.strip()]
        else:
            seeds = list(range(int(text)))
    except ValueError as exc:
        raise UsageError(f"--seeds must be an integer or a comma-separated list, got {text!r}") from exc
    if len(seeds) < 5:
        raise UsageError("the comparison needs at least 5 seeds")
    return seeds


def resolve(args, base: dict | None = None) -> dict:
    """Config file (or checkpoint config), then --set, then dedicated flags."""
    cfg = cio.load_config(args.config) if base is None else cio.resolve_config(base)
    sets = list(args.set)
    if args.seed is not None:
        sets.append(f"seed={args.seed}")
        # an explicit --seed beats section seeds inherited from a file or checkpoint
        sets += [f"{s}.seed={args.seed}" for s in cio.SEEDED_SECTIONS]
    if args.out is not None:
        sets.append(f"output_dir={json.dumps(args.out)}")
    for flag, (key, _) in SAMPLER_FLAGS.items():
        v = getattr(args, flag)
        if v is not None:
            sets.append(f"sampler.{key}={json.dumps(v)}")
    section = "tts_train" if args.command == "train-tts" else "train"
    for flag, (key, _) in TRAIN_FLAGS.items():
        v = getattr(args, flag)
        if v is not None:
            sets.append(f"{section}.{key}={json.dumps(v)}")
    if args.stop_gradient is not None:
        sets.append(f"{section}.stop_gradient_rollout={json.dumps(args.stop_gradient)}")
    return cio.apply_overrides(cfg, sets)


# --- helpers -----------------------------------------------------------------


def _out_dir(cfg) -> Path:
    d = Path(cfg["output_dir"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def _echo_config(cfg, out: Path):
    cio.write_json(out / "resolved_config.json", cfg)
    print("resolved config:")
    print(json.dumps(cfg, indent=1, sort_keys=True))


def _stored_config(cfg) -> dict:
    # the output location must not leak into checkpoints, so reruns elsewhere match bytewise
    return {k: v for k, v in cfg.items() if k != "output_dir"}


def _load(path, kind) -> dict:
    ckpt = cio.load_checkpoint(path)
    if ckpt["kind"] != kind:
        raise cio.CheckpointError(f"expected a {kind!r} checkpoint, got {ckpt['kind']!r}")
    return ckpt


def _restore(params: dict, stored: dict):
    if set(params) != set(stored):
        raise cio.CheckpointError("checkpoint parameters do not match the model")
    for k, v in stored.items():
        if params[k].shape != v.shape:
            raise cio.CheckpointError(f"parameter {k} has shape {v.shape}, model expects {params[k].shape}")
        params[k][...] = v


def _toy_net(cfg, gmm: GaussianMixture) -> DenoiserNet:
    return DenoiserNet(DenoiserConfig(dim=gmm.dim, speaker_dim=0, **cfg["denoiser"]))


def _tts_model(cfg) -> TTSModel:
    return TTSModel(cio.build_tts_config(cfg))


def _report(name: str, ok: bool, detail: str) -> bool:
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return ok


# --- subcommands -------------------------------------------------------------


def cmd_oracle_check(args, cfg) -> int:
    """Tweedie identity, score vs numerical log-density gradient, and sampler moments."""
    _echo_config(cfg, _out_dir(cfg))
    gmm = cio.build_gmm(cfg)
    rng = np.random.default_rng([cfg["seed"], 11])
    ok = True
    worst_tweedie = worst_fd = 0.0
    h = 1e-5
    for t in (0.01, 0.1, 1.0, 10.0):
        x = gmm_sample(gmm, rng, 64) + t * rng.standard_normal((64, gmm.dim))
        d = exact_denoiser(gmm, x, t)
        s = exact_score(gmm, x, t)
        resid = np.abs(d - (x + t * t * s)) / np.maximum(np.abs(d), 1.0)
        worst_tweedie = max(worst_tweedie, float(resid.max()))
        marg = marginal_at(gmm, t)
        fd = np.empty_like(x)
        for j in range(gmm.dim):
            e = np.zeros(gmm.dim)
            e[j] = h
            fd[:, j] = (log_density(marg, x + e) - log_density(marg, x - e)) / (2 * h)
        rel = np.abs(fd - s) / np.maximum(np.abs(s), 1.0)
        worst_fd = max(worst_fd, float(rel.max()))
    ok &= _report("tweedie", worst_tweedie <= args.tol, f"max Tweedie residual {worst_tweedie:.3e}")
    ok &= _report("score_fd", worst_fd <= 1e-5, f"max rel error vs finite differences = {worst_fd:.3e}")
    return 0 if ok else 1


def cmd_gradcheck(args, cfg) -> int:
    _echo_config(cfg, _out_dir(cfg))
    train_cfg = replace(cio.build_train_config(cfg), stop_gradient_rollout=False)
    schedule = cio.build_schedule(cfg)
    rng = np.random.default_rng([cfg["seed"], 12])
    ok = True

    # toy denoiser under both losses; a perturbed head so gradients are not trivially zero
    net = DenoiserNet(DenoiserConfig(dim=2, speaker_dim=3, hidden=16, seed=cfg["seed"]))
    last = max(k for k in net.params if k.startswith("W"))
    net.params[last][...] = 0.1 * rng.standard_normal(net.params[last].shape)
    n = 8
    x0 = rng.standard_normal((n, 2))
    cond = Conditioning(rng.standard_normal((n, 2)), rng.standard_normal((n, 3)))
    draws = sample_cdm_draws(rng, n, 2, train_cfg, schedule)

    def dsm():
        r = loss_dsm(net, x0, draws.t, draws.z, cond)
        return r.value, r.grads

    def cdm():
        r = loss_cdm(net, x0, draws, train_cfg, cond)
        return r.value, r.grads

    for name, fn in (("denoiser_dsm", dsm), ("denoiser_cdm", cdm)):
        rep = gradcheck(fn, net.params, tol=args.tol)
        ok &= _report(name, rep.passed, f"max rel error {rep.max_rel_error:.3e} over {rep.n_checked} entries")

    # full TTS objective with every module
    corpus = generate_corpus(cio.build_corpus_config(cfg))
    model = _tts_model(cfg)
    batch = make_batch(corpus.utterances[:2])
    params = model.named_params()
    for name, p in params.items():
        if p.ndim == 2 and not np.any(p):
            p[...] = 0.1 * rng.standard_normal(p.shape)
    tts_cfg = replace(cio.build_train_config(cfg, "tts_train"), stop_gradient_rollout=False)

    def tts_objective(skip_duration):
        def fn():
            parts, grads = tts_losses(model, batch, tts_cfg, schedule, np.random.default_rng(0))
            if skip_duration:
                # the duration predictor reads a detached copy of the token embeddings
                parts["L_duration"] = 0.0
            return total_loss({k: v for k, v in parts.items() if v is not None}, tts_cfg.lam), grads
        return fn

    # one check per module so each gets its own >= 200 probed entries
    for module in ("speakers", "encoder", "duration", "decoder"):
        sub = {k: v for k, v in params.items() if k.startswith(module + ".")}
        rep = gradcheck(tts_objective(module == "encoder"), sub, tol=args.tol,
                        rng=np.random.default_rng([cfg["seed"], 15]))
        ok &= _report(f"tts_{module}", rep.passed,
                      f"max rel error {rep.max_rel_error:.3e} over {rep.n_checked} entries")
    return 0 if ok else 1


def _finish_training(out, kind, cfg, params, optimizer, step, history) -> None:
    cio.export_metrics(history, out / "history.csv", "csv")
    cio.save_checkpoint(out / "checkpoint.json", kind, _stored_config(cfg), params,
                        optimizer.state_dict(), step)


def _diverged(out, kind, cfg, exc: TrainingDiverged, optimizer) -> int:
    cio.export_metrics(exc.history, out / "history.csv", "csv")
    cio.save_checkpoint(out / "last_good_checkpoint.json", kind, _stored_config(cfg),
                        exc.last_params, optimizer.state_dict(), exc.step)
    print(f"error: training diverged: {exc}", file=sys.stderr)
    return 1


def cmd_train_toy(args, cfg) -> int:
    ckpt = getattr(args, "_ckpt", None)
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    gmm = cio.build_gmm(cfg)
    train_cfg = cio.build_train_config(cfg)
    net = _toy_net(cfg, gmm)
    optimizer = Adam(train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
    start = 0
    if ckpt is not None:
        _restore(net.params, ckpt["params"])
        optimizer.load_state_dict(ckpt["optimizer"])
        start = ckpt["step"]
    try:
        _, history = train(net, gmm, train_cfg, cio.build_schedule(cfg), optimizer, start_step=start)
    except TrainingDiverged as exc:
        return _diverged(out, "toy", cfg, exc, optimizer)
    step = max(start, train_cfg.n_steps)
    _finish_training(out, "toy", cfg, net.params, optimizer, step, history)
    if history:
        print(f"trained steps {start}..{step - 1}; final L_final {history[-1]['L_final']:.6g}")
    return 0


def cmd_train_tts(args, cfg) -> int:
    ckpt = getattr(args, "_ckpt", None)
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    corpus = generate_corpus(cio.build_corpus_config(cfg))
    cio.save_corpus(out / "corpus.json", corpus)
    train_cfg = cio.build_train_config(cfg, "tts_train")
    model = _tts_model(cfg)
    params = model.named_params()
    optimizer = Adam(train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
    start = 0
    if ckpt is not None:
        _restore(params, ckpt["params"])
        optimizer.load_state_dict(ckpt["optimizer"])
        start = ckpt["step"]
    try:
        _, history = train_tts(model, corpus, train_cfg, cio.build_schedule(cfg), optimizer, start_step=start)
    except TrainingDiverged as exc:
        return _diverged(out, "tts", cfg, exc, optimizer)
    step = max(start, train_cfg.n_steps)
    _finish_training(out, "tts", cfg, params, optimizer, step, history)
    if history:
        print(f"trained steps {start}..{step - 1}; final L_final {history[-1]['L_final']:.6g}")
    return 0


def _toy_from_checkpoint(path, cfg):
    ckpt = _load(path, "toy")
    stored = cio.resolve_config(ckpt["config"])
    gmm = cio.build_gmm(stored)
    net = _toy_net(stored, gmm)
    _restore(net.params, ckpt["params"])
    return net, gmm


def cmd_sample(args, cfg) -> int:
    if args.n < 1:
        raise UsageError("--n must be positive")
    net, gmm = _toy_from_checkpoint(args.checkpoint, cfg)
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    params = replace(cio.build_sampler(cfg), prior_center="zero")
    x = stochastic_heun_sample(net, None, params, np.random.default_rng([cfg["seed"], 13]), shape=(args.n, gmm.dim))
    cols = [f"x{j}" for j in range(gmm.dim)]
    cio.write_csv(out / "samples.csv", cols, [dict(zip(cols, row)) for row in x.tolist()])
    if args.n >= 1000:
        m = distribution_distance(x, gmm, rng=np.random.default_rng([cfg["seed"], 2]))
        cio.write_json(out / "sample_metrics.json", {"schema": REPORT_SCHEMA, **m.to_dict()})
        print(json.dumps(m.to_dict()))
    return 0


def cmd_synth(args, cfg) -> int:
    try:
        tokens = np.array([int(t) for t in args.tokens.split(",") if t.strip()])
    except ValueError as exc:
        raise UsageError(f"--tokens must be comma-separated integers, got {args.tokens!r}") from exc
    ckpt = _load(args.checkpoint, "tts")
    model = _tts_model(cio.resolve_config(ckpt["config"]))
    _restore(model.named_params(), ckpt["params"])
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    try:
        frames, durs = synthesize(model, tokens, args.speaker, cio.build_sampler(cfg),
                                  np.random.default_rng([cfg["seed"], 14]), return_durations=True)
    except IndexError as exc:
        raise UsageError(str(exc)) from exc
    token_of_frame = np.repeat(tokens, durs)
    cols = ["frame", "token"] + [f"c{j}" for j in range(frames.shape[1])]
    rows = [dict(zip(cols, [i, int(tok)] + list(f))) for i, (tok, f) in enumerate(zip(token_of_frame, frames.tolist()))]
    cio.write_csv(out / "frames.csv", cols, rows)
    cio.write_json(out / "durations.json", {"tokens": tokens.tolist(), "durations": durs.tolist()})
    print(f"synthesized {len(frames)} frames for {len(tokens)} tokens")
    return 0


def cmd_eval_drift(args, cfg) -> int:
    if args.oracle:
        gmm = cio.build_gmm(cfg)
        den = gmm.as_denoiser()
    else:
        den, gmm = _toy_from_checkpoint(args.checkpoint, cfg)
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    settings = cio.build_compare(cfg)
    metrics = evaluate_denoiser(den, gmm, cfg["seed"], settings, cio.build_sampler(cfg), cio.build_train_config(cfg))
    report = {"schema": REPORT_SCHEMA, "seed": cfg["seed"], "oracle": bool(args.oracle), "metrics": metrics}
    cio.export_metrics(report, out / "drift_report.json", "json")
    cio.export_metrics(report, out / "drift_report.csv", "csv")
    print(json.dumps(metrics, indent=1, sort_keys=True))
    return 0


def cmd_compare(args, cfg) -> int:
    seeds = parse_seeds(args.seeds)
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    report = compare_cdm_vs_dsm(
        cio.build_gmm(cfg), seeds, cio.build_compare(cfg), cio.build_sampler(cfg),
        cio.build_train_config(cfg), oracle=args.oracle,
    )
    cio.export_metrics(report, out / "compare_report.json", "json")
    cio.export_metrics(report, out / "compare_report.csv", "csv")
    med = report["medians"]
    for key in sorted(med["cdm"]):
        print(f"{key}: cdm {med['cdm'][key]:.6g}  dsm {med['dsm'][key]:.6g}")
    return 0


COMMANDS = {
    "oracle-check": cmd_oracle_check,
    "gradcheck": cmd_gradcheck,
    "train-toy": cmd_train_toy,
    "train-tts": cmd_train_tts,
    "sample": cmd_sample,
    "synth": cmd_synth,
    "eval-drift": cmd_eval_drift,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        base = None
        if getattr(args, "resume", None):
            kind = "tts" if args.command == "train-tts" else "toy"
            args._ckpt = _load(args.resume, kind)
            base = args._ckpt["config"]
            base.pop("schema", None)
        cfg = resolve(args, base)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, cio.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except cio.CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
