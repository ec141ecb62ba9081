"""Turn manifest entries into per-utterance feature matrices."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .audio_io import Entry, VadConfig, apply_vad, load_wav
from .errors import SVError
from .features import FeatureConfig, cache_name, feature_digest, raw_features, read_cache, write_cache

log = logging.getLogger(__name__)


def utterance_features(path, fcfg: FeatureConfig, vcfg: VadConfig) -> np.ndarray:
    """load -> VAD -> un-normalized coefficients for the whole utterance."""
    return raw_features(apply_vad(load_wav(path), vcfg), fcfg)


def load_features(entries: list[Entry], fcfg: FeatureConfig, vcfg: VadConfig, cache_dir=None):
    """Features for every entry, as ``(features, failures)``.

    ``failures`` maps a path to ``"ErrorKind: message"``. With ``cache_dir``
    the float32 cache is authoritative: missing entries are computed,
    written, then read back, so cached and fresh runs see identical values.
    """
    digest = feature_digest(fcfg, vcfg)
    features: dict[str, np.ndarray] = {}
    failures: dict[str, str] = {}
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
    for e in entries:
        if e.path in features:
            continue
        try:
            if cache_dir is None:
                features[e.path] = utterance_features(e.path, fcfg, vcfg)
                continue
            cpath = Path(cache_dir) / cache_name(e.path)
            if not cpath.exists():
                write_cache(cpath, utterance_features(e.path, fcfg, vcfg), digest)
            features[e.path] = read_cache(cpath, digest)
        except SVError as exc:
            failures[e.path] = f"{exc.kind}: {exc}"
            log.warning("%s: %s", e.path, failures[e.path])
        except OSError as exc:
            failures[e.path] = f"IOError: {exc}"
            log.warning("%s: %s", e.path, failures[e.path])
    return features, failures
