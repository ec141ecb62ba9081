#!/usr/bin/env python3
"""LSTM vs GMM-UBM on synthetic corpora generated from several seeds.

Prints one row per corpus seed: GMM EER, pretrained and fine-tuned LSTM EER,
and wall time. Example:

    python3 scripts/fixture_experiment.py --corpus-seeds 0 1 2 3 --config configs/fixture.yaml
"""

import argparse
import logging
import tempfile
import time
from pathlib import Path

from lstm_sv import pipeline as P
from lstm_sv.audio_io import resolve_manifest
from lstm_sv.config import load_config, with_overrides
from lstm_sv.evaluation import read_trials
from lstm_sv.synthetic import make_corpus


def run_one(cfg, corpus: Path):
    manifest = resolve_manifest(corpus / "manifest.tsv")
    trials = read_trials(corpus / "trials.tsv")
    gf, _ = P.gmm_features(cfg, manifest)
    lf, _ = P.lstm_features(cfg, manifest)
    gmm = P.evaluate_gmm(P.train_gmm(cfg, manifest, gf), cfg, manifest, trials, gf).result.eer

    start = time.perf_counter()
    data = P.dev_data(manifest, lf, cfg.features.frames_per_second)
    model = P.init_model(cfg)
    P.run_pretrain(model, data, cfg)
    pre = P.evaluate_lstm(model, cfg, manifest, trials, lf).result.eer
    P.run_finetune(model, data, cfg)
    fine = P.evaluate_lstm(model, cfg, manifest, trials, lf).result.eer
    return gmm, pre, fine, time.perf_counter() - start


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default="configs/fixture.yaml")
    ap.add_argument("--corpus-seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    ap.add_argument("--train-seed", type=int, default=0)
    ap.add_argument("--hidden", type=int, help="override lstm.hidden_dim")
    ap.add_argument("--workdir", help="keep generated corpora here")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(message)s")

    cfg = with_overrides(load_config(args.config), seed=args.train_seed)
    if args.hidden:
        from dataclasses import replace
        cfg = replace(cfg, lstm=replace(cfg.lstm, hidden_dim=args.hidden))

    root = Path(args.workdir or tempfile.mkdtemp(prefix="sv-fixture-"))
    print("corpus_seed,gmm_eer,pretrained_eer,finetuned_eer,train_seconds")
    for seed in args.corpus_seeds:
        corpus = root / f"seed{seed}"
        if not (corpus / "manifest.tsv").exists():
            make_corpus(corpus, seed=seed)
        gmm, pre, fine, took = run_one(cfg, corpus)
        print(f"{seed},{gmm:.4f},{pre:.4f},{fine:.4f},{took:.0f}", flush=True)


if __name__ == "__main__":
    main()
