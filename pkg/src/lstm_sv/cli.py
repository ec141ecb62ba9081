"""``lstm-sv`` command line: extract, train, enroll, score, sweep, GMM baseline."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import pipeline as P
from .audio_io import apply_vad, load_wav, resolve_manifest
from .config import RunConfig, load_config, with_overrides
from .errors import DigestMismatch, SVError
from .evaluation import (
    enroll,
    enrollment_windows,
    format_scores,
    format_sweep,
    load_speakers,
    make_trials,
    read_trials,
    save_speakers,
    score_embeddings,
)
from .features import cache_name, feature_digest, raw_features, segments, write_cache
from .gmm import load_gmm, map_adapt, save_gmm
from .network import embed, load_checkpoint, save_checkpoint
from .synthetic import make_corpus
from .training import format_log

log = logging.getLogger("lstm_sv")

EXIT_OK, EXIT_ITEMS, EXIT_ERROR = 0, 1, 2


# -- shared plumbing ----------------------------------------------------------------------


def _seed(args) -> int | None:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("SV_SEED")
    return int(env) if env not in (None, "") else None


def resolve_config(args, phase: str | None = None) -> RunConfig:
    cfg = load_config(args.config)
    return with_overrides(
        cfg,
        phase=phase,
        learning_rate=getattr(args, "lr", None),
        momentum=getattr(args, "momentum", None),
        batch_size=getattr(args, "batch_size", None),
        epochs=getattr(args, "epochs", None),
        th0=getattr(args, "th0", None),
        pair_selection=False if getattr(args, "no_pair_selection", False) else None,
        batchnorm=False if getattr(args, "no_batchnorm", False) else None,
        seed=_seed(args),
        margin=getattr(args, "margin", None),
        lam=getattr(args, "lam", None),
        duration_s=getattr(args, "duration", None),
        segments=getattr(args, "segments", None),
        normalize_dvector=True if getattr(args, "normalize_dvector", False) else None,
        num_components=getattr(args, "components", None),
    )


def write_run_info(out_dir: Path, cfg: RunConfig, command: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    info = {
        "command": command,
        "config": cfg.to_dict(),
        "seed": {"pretrain": cfg.pretrain.seed, "finetune": cfg.finetune.seed, "gmm": cfg.gmm.seed},
        "version": __version__,
    }
    (out_dir / "resolved_config.json").write_text(json.dumps(info, sort_keys=True, indent=2) + "\n")


def _cache_dir(root, digest: str):
    # one subdirectory per feature digest so LSTM and MFCC caches can share a root
    return None if root is None else Path(root) / digest[:16]


def _load(args, cfg: RunConfig, manifest, system: str, splits=("dev", "enroll", "eval")):
    if system == "gmm":
        feats, failures = P.gmm_features(cfg, manifest, splits, _cache_dir(args.feature_cache, P.gmm_digest(cfg)))
    else:
        feats, failures = P.lstm_features(cfg, manifest, splits, _cache_dir(args.feature_cache, P.lstm_digest(cfg)))
    for path, why in failures.items():
        print(f"FAILED {path}: {why}", file=sys.stderr)
    return feats, failures


def _manifest(args):
    return resolve_manifest(args.manifest, args.filter_prefix)


def _trials(args, manifest):
    return read_trials(args.trials) if args.trials else make_trials(manifest)


def _check_digest(found: str, expected: str, what: str) -> None:
    if found != expected:
        raise DigestMismatch(f"{what} was built with feature digest {found[:12]}, config gives {expected[:12]}")


def _status(failures) -> int:
    return EXIT_ITEMS if failures else EXIT_OK


# -- commands --------------------------------------------------------------------------------


def cmd_extract(args) -> int:
    cfg = resolve_config(args)
    manifest = _manifest(args)
    fcfg = cfg.gmm_features() if args.system == "gmm" else cfg.features
    vcfg = cfg.vad_config()
    digest = feature_digest(fcfg, vcfg)
    out = Path(args.out)
    write_run_info(out, cfg, "extract")
    cache = _cache_dir(out, digest)
    cache.mkdir(parents=True, exist_ok=True)
    done, failed, total_in, total_kept = 0, 0, 0, 0
    seen = set()
    for e in manifest.entries:
        if e.path in seen:
            continue
        seen.add(e.path)
        try:
            w = load_wav(e.path)
            voiced = apply_vad(w, vcfg)
            write_cache(cache / cache_name(e.path), raw_features(voiced, fcfg), digest)
        except SVError as exc:
            failed += 1
            print(f"FAILED {e.path}: {exc.kind}: {exc}", file=sys.stderr)
            continue
        total_in += w.samples.size
        total_kept += voiced.samples.size
        done += 1
    rejected = 1.0 - total_kept / total_in if total_in else 0.0
    print(f"extracted={done} failed={failed} vad_rejection_rate={rejected:.4f} cache={cache}")
    return EXIT_ITEMS if failed else EXIT_OK


def _save_model(out: Path, model, cfg, history, phase):
    meta = {"phase": phase, "epochs": len(history), "config": cfg.to_dict(), "version": __version__}
    save_checkpoint(out / "model.ckpt", model, P.lstm_digest(cfg), meta)
    (out / "train_log.csv").write_text(format_log(history))


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args, "pretrain")
    manifest = _manifest(args)
    feats, failures = _load(args, cfg, manifest, "lstm", ("dev",))
    data = P.dev_data(manifest, feats, cfg.features.frames_per_second)
    out = Path(args.out)
    write_run_info(out, cfg, "pretrain")
    model = P.init_model(cfg)
    history = P.run_pretrain(model, data, cfg)
    _save_model(out, model, cfg, history, "pretrain")
    print(f"pretrain epochs={len(history)} checkpoint={out / 'model.ckpt'}")
    return _status(failures)


def cmd_finetune(args) -> int:
    cfg = resolve_config(args, "finetune")
    model, digest, _ = load_checkpoint(args.init)
    _check_digest(digest, P.lstm_digest(cfg), args.init)
    manifest = _manifest(args)
    feats, failures = _load(args, cfg, manifest, "lstm", ("dev",))
    data = P.dev_data(manifest, feats, cfg.features.frames_per_second)
    out = Path(args.out)
    write_run_info(out, cfg, "finetune")
    history = P.run_finetune(model, data, cfg)
    _save_model(out, model, cfg, history, "finetune")
    if history:
        last = history[-1]
        print(f"finetune epochs={len(history)} genuine_mean_D={last['genuine_mean_D']:.4f} "
              f"impostor_mean_D={last['impostor_mean_D']:.4f}")
    return _status(failures)


def _lstm_checkpoint(args, cfg):
    model, digest, _ = load_checkpoint(args.checkpoint)
    _check_digest(digest, P.lstm_digest(cfg), args.checkpoint)
    return model


def cmd_enroll(args) -> int:
    cfg = resolve_config(args)
    model = _lstm_checkpoint(args, cfg)
    manifest = _manifest(args)
    feats, failures = _load(args, cfg, manifest, "lstm", ("enroll",))
    n = cfg.features.frames_for(cfg.eval.duration_s)
    speakers = {
        spk: enroll(model, wins, spk, cfg.eval.normalize_dvector)
        for spk, wins in enrollment_windows(manifest, feats, n, cfg.eval.segments).items() if wins
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_speakers(out, speakers)
    print(f"enrolled={len(speakers)} -> {out}")
    return _status(failures)


def cmd_verify(args) -> int:
    cfg = resolve_config(args)
    model = _lstm_checkpoint(args, cfg)
    speakers = load_speakers(args.speakers)
    if args.speaker not in speakers:
        from .errors import MissingEnrollment
        raise MissingEnrollment(f"no enrollment for claimed speaker {args.speaker}")
    raw = raw_features(apply_vad(load_wav(args.wav), cfg.vad_config()), cfg.features)
    wins = segments(raw, cfg.features.frames_for(cfg.eval.duration_s), cfg.eval.segments)
    s = float(np.mean(score_embeddings(speakers[args.speaker], embed(model, wins))))
    decision = "accept" if s >= args.threshold else "reject"
    print(f"score={s!r} decision={decision}")
    return EXIT_OK


def _evaluate(args, cfg, manifest, trials):
    if args.system == "gmm":
        ubm, digest = load_gmm(args.checkpoint)
        _check_digest(digest, P.gmm_digest(cfg), args.checkpoint)
        feats, failures = _load(args, cfg, manifest, "gmm", ("enroll", "eval"))
        return P.evaluate_gmm(ubm, cfg, manifest, trials, feats), failures
    model = _lstm_checkpoint(args, cfg)
    feats, failures = _load(args, cfg, manifest, "lstm", ("enroll", "eval"))
    return P.evaluate_lstm(model, cfg, manifest, trials, feats), failures


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    manifest = _manifest(args)
    trials = _trials(args, manifest)
    res, failures = _evaluate(args, cfg, manifest, trials)
    out = Path(args.out)
    write_run_info(out, cfg, "evaluate")
    (out / "scores.csv").write_text(format_scores(res.rows))
    for path, why in res.skipped:
        print(f"SKIPPED {path}: {why}", file=sys.stderr)
    print(f"EER={res.result.eer!r}")
    return _status(failures)


def cmd_sweep_duration(args) -> int:
    base = resolve_config(args)
    manifest = _manifest(args)
    trials = _trials(args, manifest)
    system = args.system
    feats, failures = _load(args, base, manifest, system)
    out = Path(args.out)
    write_run_info(out, base, "sweep-duration")
    rows = []
    for d in args.durations:
        cfg = P.at_duration(base, d)
        if system == "gmm":
            res = P.evaluate_gmm(P.train_gmm(cfg, manifest, feats), cfg, manifest, trials, feats)
        else:
            data = P.dev_data(manifest, feats, cfg.features.frames_per_second)
            model, _ = P.train_lstm(cfg, data)
            res = P.evaluate_lstm(model, cfg, manifest, trials, feats)
        rows.append((d, res.result.eer))
        print(f"duration_s={d!r} EER={res.result.eer!r}", flush=True)
    (out / "sweep.csv").write_text(format_sweep(rows))
    return _status(failures)


def cmd_train_ubm(args) -> int:
    cfg = resolve_config(args)
    manifest = _manifest(args)
    feats, failures = _load(args, cfg, manifest, "gmm", ("dev",))
    out = Path(args.out)
    write_run_info(out, cfg, "train-ubm")
    ubm = P.train_gmm(cfg, manifest, feats)
    save_gmm(out / "ubm.gmm", ubm, P.gmm_digest(cfg))
    print(f"ubm K={ubm.weights.size} iterations={len(ubm.loglik_history)} -> {out / 'ubm.gmm'}")
    return _status(failures)


def cmd_adapt_speaker(args) -> int:
    cfg = resolve_config(args)
    ubm, digest = load_gmm(args.ubm)
    _check_digest(digest, P.gmm_digest(cfg), args.ubm)
    manifest = _manifest(args)
    feats, failures = _load(args, cfg, manifest, "gmm", ("enroll",))
    n = cfg.features.frames_for(cfg.eval.duration_s)
    wanted = set(args.speaker) if args.speaker else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for spk, wins in enrollment_windows(manifest, feats, n, cfg.eval.segments).items():
        if (wanted and spk not in wanted) or not wins:
            continue
        save_gmm(out / f"{spk}.gmm", map_adapt(ubm, np.concatenate(wins), cfg.gmm.relevance_factor), digest)
        count += 1
    print(f"adapted={count} -> {out}")
    return _status(failures)


def cmd_synth(args) -> int:
    try:
        path = make_corpus(args.out, args.speakers, args.utterances, args.utt_duration, args.seed,
                           num_enroll=args.enroll, num_eval=args.eval)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(f"manifest={path}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------------


def _durations(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lstm-sv", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--seed", type=int, help="overrides the config; falls back to $SV_SEED")
    common.add_argument("--feature-cache", metavar="DIR", help="reuse per-utterance feature caches")
    common.add_argument("--filter-prefix", metavar="PREFIX",
                        help="speakers with this prefix are evaluation speakers, the rest development")
    common.add_argument("--duration", type=float, help="window length in seconds")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--manifest", required=True)

    train = argparse.ArgumentParser(add_help=False)
    train.add_argument("--lr", type=float)
    train.add_argument("--momentum", type=float)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--epochs", type=int)
    train.add_argument("--no-batchnorm", action="store_true")

    pairs = argparse.ArgumentParser(add_help=False)
    pairs.add_argument("--th0", type=float)
    pairs.add_argument("--margin", type=float)
    pairs.add_argument("--lambda", dest="lam", type=float)
    pairs.add_argument("--no-pair-selection", action="store_true")

    scoring = argparse.ArgumentParser(add_help=False)
    scoring.add_argument("--segments", type=int, help="windows taken from each utterance")
    scoring.add_argument("--normalize-dvector", action="store_true")

    def add(name, func, parents, help_):
        sp = sub.add_parser(name, parents=parents, help=help_)
        sp.set_defaults(func=func)
        return sp

    sp = add("extract", cmd_extract, [common, data], "compute feature caches")
    sp.add_argument("--out", required=True)
    sp.add_argument("--system", choices=("lstm", "gmm"), default="lstm")

    sp = add("pretrain", cmd_pretrain, [common, data, train], "speaker-classification pretraining")
    sp.add_argument("--out", required=True)

    sp = add("finetune", cmd_finetune, [common, data, train, pairs], "contrastive fine-tuning")
    sp.add_argument("--init", required=True, help="pretrained checkpoint")
    sp.add_argument("--out", required=True)

    sp = add("enroll", cmd_enroll, [common, data, scoring], "build d-vectors for enroll speakers")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True, help="speaker models (JSON)")

    sp = add("verify", cmd_verify, [common, scoring], "score one trial")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--speakers", required=True)
    sp.add_argument("--speaker", required=True)
    sp.add_argument("--wav", required=True)
    sp.add_argument("--threshold", type=float, required=True)

    sp = add("evaluate", cmd_evaluate, [common, data, scoring], "score a trial list and report EER")
    sp.add_argument("--checkpoint", required=True, help="LSTM checkpoint, or UBM with --system gmm")
    sp.add_argument("--trials", help="trial list; default crosses every eval utterance with every speaker")
    sp.add_argument("--system", choices=("lstm", "gmm"), default="lstm")
    sp.add_argument("--out", required=True)

    sp = add("sweep-duration", cmd_sweep_duration, [common, data, train, pairs, scoring],
             "train and evaluate at several window lengths")
    sp.add_argument("--durations", type=_durations, required=True, help="comma separated seconds")
    sp.add_argument("--trials")
    sp.add_argument("--system", choices=("lstm", "gmm"), default="lstm")
    sp.add_argument("--components", type=int)
    sp.add_argument("--out", required=True)

    sp = add("train-ubm", cmd_train_ubm, [common, data], "train the GMM background model")
    sp.add_argument("--components", type=int)
    sp.add_argument("--out", required=True)

    sp = add("adapt-speaker", cmd_adapt_speaker, [common, data, scoring], "MAP-adapt speaker GMMs")
    sp.add_argument("--ubm", required=True)
    sp.add_argument("--speaker", action="append", help="restrict to these speakers")
    sp.add_argument("--out", required=True)

    sp = add("synth", cmd_synth, [], "write a synthetic test corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--speakers", type=int, default=5)
    sp.add_argument("--utterances", type=int, default=20)
    sp.add_argument("--utt-duration", type=float, default=3.0)
    sp.add_argument("--enroll", type=int, default=4, help="enroll utterances per speaker")
    sp.add_argument("--eval", type=int, default=6, help="eval utterances per speaker")
    sp.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SVError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
