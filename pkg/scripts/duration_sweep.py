#!/usr/bin/env python3
"""EER against window duration for both systems on a synthetic corpus.

Development crops, enrollment and test windows all share the swept duration.
Writes ``duration_s,eer`` CSVs for the LSTM and the GMM-UBM and prints them.

    python3 scripts/duration_sweep.py --durations 0.5 1 1.5 2 --out sweep/
"""

import argparse
import logging
from pathlib import Path

from lstm_sv import pipeline as P
from lstm_sv.audio_io import resolve_manifest
from lstm_sv.config import load_config
from lstm_sv.evaluation import format_sweep, read_trials
from lstm_sv.synthetic import make_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default="configs/fixture.yaml")
    ap.add_argument("--durations", type=float, nargs="+", default=[0.5, 1.0, 1.5, 2.0])
    ap.add_argument("--corpus", help="existing corpus directory (default: generate one under --out)")
    ap.add_argument("--utt-duration", type=float, default=3.0)
    ap.add_argument("--out", default="sweep")
    args = ap.parse_args()
    logging.basicConfig(level=logging.ERROR)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = Path(args.corpus) if args.corpus else out / "corpus"
    if not (corpus / "manifest.tsv").exists():
        make_corpus(corpus, duration=args.utt_duration)
    base = load_config(args.config)
    manifest = resolve_manifest(corpus / "manifest.tsv")
    trials = read_trials(corpus / "trials.tsv")
    lf, _ = P.lstm_features(base, manifest)
    gf, _ = P.gmm_features(base, manifest)

    rows = {"lstm": [], "gmm": []}
    for d in args.durations:
        cfg = P.at_duration(base, d)
        data = P.dev_data(manifest, lf, cfg.features.frames_per_second)
        model, _ = P.train_lstm(cfg, data)
        rows["lstm"].append((d, P.evaluate_lstm(model, cfg, manifest, trials, lf).result.eer))
        rows["gmm"].append((d, P.evaluate_gmm(P.train_gmm(cfg, manifest, gf), cfg, manifest, trials, gf).result.eer))
        print(f"{d:g}s  lstm {rows['lstm'][-1][1]:.4f}  gmm {rows['gmm'][-1][1]:.4f}", flush=True)
    for system, r in rows.items():
        (out / f"sweep_{system}.csv").write_text(format_sweep(r))
    print(f"wrote {out}/sweep_lstm.csv and {out}/sweep_gmm.csv")


if __name__ == "__main__":
    main()
