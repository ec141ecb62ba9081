"""End-to-end helpers shared by the CLI, scripts and acceptance tests."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .audio_io import Manifest
from .config import RunConfig
from .data import load_features
from .errors import EmptyBatch, TooFewFrames
from .features import feature_digest
from .gmm import GmmModel, evaluate_gmm_protocol, train_ubm
from .evaluation import ProtocolResult, evaluate_protocol
from .network import LstmModel
from .training import TrainData, finetune, pretrain

PRETRAIN_STREAM, FINETUNE_STREAM, INIT_STREAM = 1, 2, 0


def lstm_digest(cfg: RunConfig) -> str:
    return feature_digest(cfg.features, cfg.vad_config())


def gmm_digest(cfg: RunConfig) -> str:
    return feature_digest(cfg.gmm_features(), cfg.vad_config())


def lstm_features(cfg: RunConfig, manifest: Manifest, splits=("dev", "enroll", "eval"), cache_dir=None):
    entries = [e for e in manifest.entries if e.split in splits]
    return load_features(entries, cfg.features, cfg.vad_config(), cache_dir)


def gmm_features(cfg: RunConfig, manifest: Manifest, splits=("dev", "enroll", "eval"), cache_dir=None):
    entries = [e for e in manifest.entries if e.split in splits]
    return load_features(entries, cfg.gmm_features(), cfg.vad_config(), cache_dir)


def dev_data(manifest: Manifest, features, frames_per_second: float) -> TrainData:
    groups = {
        spk: [features[p] for p in paths if p in features]
        for spk, paths in manifest.by_speaker("dev").items()
    }
    groups = {spk: utts for spk, utts in groups.items() if utts}
    if not groups:
        raise EmptyBatch("no usable development utterances")
    return TrainData.from_groups(groups, frames_per_second)


def rng_for(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def init_model(cfg: RunConfig) -> LstmModel:
    return LstmModel.init(cfg.lstm_config(), rng_for(cfg.pretrain.seed, INIT_STREAM),
                          batchnorm=cfg.pretrain.batchnorm)


def run_pretrain(model: LstmModel, data: TrainData, cfg: RunConfig):
    return pretrain(model, data, cfg.pretrain, rng_for(cfg.pretrain.seed, PRETRAIN_STREAM))


def run_finetune(model: LstmModel, data: TrainData, cfg: RunConfig):
    return finetune(model, data, cfg.finetune, cfg.contrastive,
                    rng_for(cfg.finetune.seed, FINETUNE_STREAM))


def train_lstm(cfg: RunConfig, data: TrainData):
    """Initialize, pretrain, fine-tune; returns ``(model, history)``."""
    model = init_model(cfg)
    history = run_pretrain(model, data, cfg)
    history += run_finetune(model, data, cfg)
    return model, history


def evaluate_lstm(model: LstmModel, cfg: RunConfig, manifest: Manifest, trials, features) -> ProtocolResult:
    return evaluate_protocol(model, manifest, trials, features, cfg.eval.duration_s,
                             cfg.features.frames_per_second, cfg.eval.segments,
                             cfg.eval.normalize_dvector)


def ubm_frames(manifest: Manifest, features, cfg: RunConfig) -> np.ndarray:
    """Dev frames for UBM training, normalized per ``eval.duration_s`` segment
    so the UBM sees the same statistics as enrollment and test windows."""
    from .features import segments

    n = int(round(cfg.eval.duration_s * cfg.features.frames_per_second))
    wins = []
    for e in manifest.split("dev"):
        if e.path in features and features[e.path].shape[0] >= n:
            wins.extend(segments(features[e.path], n))
    if not wins:
        raise TooFewFrames(f"no development utterance reaches {n} frames")
    return np.concatenate(wins)


def train_gmm(cfg: RunConfig, manifest: Manifest, features) -> GmmModel:
    g = cfg.gmm
    return train_ubm(ubm_frames(manifest, features, cfg), g.num_components, g.seed,
                     g.max_iter, g.tol, g.floor_ratio)


def evaluate_gmm(ubm: GmmModel, cfg: RunConfig, manifest: Manifest, trials, features) -> ProtocolResult:
    return evaluate_gmm_protocol(ubm, manifest, trials, features, cfg.eval.duration_s,
                                 cfg.features.frames_per_second, cfg.eval.segments,
                                 cfg.gmm.relevance_factor)


def at_duration(cfg: RunConfig, duration_s: float) -> RunConfig:
    """Same config with development, enrollment and test windows at ``duration_s``."""
    return replace(
        cfg,
        pretrain=replace(cfg.pretrain, crop_duration_s=duration_s),
        finetune=replace(cfg.finetune, crop_duration_s=duration_s),
        eval=replace(cfg.eval, duration_s=duration_s),
    )
