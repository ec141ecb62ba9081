"""Run configuration: nested dataclasses loaded from YAML plus CLI overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field, fields, replace

import yaml

from .audio_io import VadConfig
from .errors import ConfigError
from .features import FeatureConfig
from .gmm import GmmConfig
from .network import ContrastiveConfig, LstmConfig
from .training import TrainConfig


@dataclass(frozen=True)
class VadSection:
    threshold_db: float = 30.0
    enabled: bool = True


@dataclass(frozen=True)
class LstmSection:
    hidden_dim: int = 300
    num_layers: int = 2


@dataclass(frozen=True)
class EvalConfig:
    duration_s: float = 1.0
    segments: int = 1
    normalize_dvector: bool = False

    def __post_init__(self):
        if self.duration_s <= 0 or self.segments < 1:
            raise ConfigError("eval duration must be positive and segments >= 1")


@dataclass(frozen=True)
class GmmSection(GmmConfig):
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    vad: VadSection = field(default_factory=VadSection)
    lstm: LstmSection = field(default_factory=LstmSection)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    pretrain: TrainConfig = field(
        default_factory=lambda: TrainConfig(phase="pretrain", batch_size=8, epochs=150)
    )
    finetune: TrainConfig = field(
        default_factory=lambda: TrainConfig(phase="finetune", learning_rate=0.01, epochs=15)
    )
    eval: EvalConfig = field(default_factory=EvalConfig)
    gmm: GmmSection = field(default_factory=GmmSection)

    def vad_config(self) -> VadConfig:
        return self.features.vad(self.vad.threshold_db, self.vad.enabled)

    def gmm_features(self) -> FeatureConfig:
        return replace(self.features, mode="mfcc")

    def lstm_config(self) -> LstmConfig:
        return LstmConfig(self.features.num_coeffs, self.lstm.hidden_dim, self.lstm.num_layers)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _SECTIONS.get((cls, name))
        kwargs[name] = _build(sub, value, f"{where}.{name}") if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_SECTIONS = {
    (RunConfig, "features"): FeatureConfig,
    (RunConfig, "vad"): VadSection,
    (RunConfig, "lstm"): LstmSection,
    (RunConfig, "contrastive"): ContrastiveConfig,
    (RunConfig, "pretrain"): TrainConfig,
    (RunConfig, "finetune"): TrainConfig,
    (RunConfig, "eval"): EvalConfig,
    (RunConfig, "gmm"): GmmSection,
}


def config_from_dict(data: dict | None) -> RunConfig:
    data = dict(data or {})
    data.setdefault("pretrain", {})
    data.setdefault("finetune", {})
    if not isinstance(data["pretrain"], dict) or not isinstance(data["finetune"], dict):
        raise ConfigError("pretrain/finetune sections must be mappings")
    # section defaults differ from the bare TrainConfig defaults
    defaults = RunConfig()
    data["pretrain"] = {**_plain(defaults.pretrain), **data["pretrain"], "phase": "pretrain"}
    data["finetune"] = {**_plain(defaults.finetune), **data["finetune"], "phase": "finetune"}
    return _build(RunConfig, data, "config")


def _plain(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    return config_from_dict(data or {})


def with_overrides(cfg: RunConfig, phase: str | None = None, **flags) -> RunConfig:
    """Apply CLI flag values (``None`` means not given).

    Training flags go to ``phase`` (or both phases when ``phase`` is None);
    ``seed`` applies everywhere.
    """
    train_keys = {"learning_rate", "momentum", "batch_size", "epochs", "th0",
                  "pair_selection", "batchnorm", "crop_duration_s"}
    given = {k: v for k, v in flags.items() if v is not None}
    train = {k: v for k, v in given.items() if k in train_keys}
    phases = [phase] if phase else ["pretrain", "finetune"]
    updates = {}
    for ph in phases:
        sect = getattr(cfg, ph)
        t = dict(train)
        if "seed" in given:
            t["seed"] = given["seed"]
        if t:
            updates[ph] = replace(sect, **t)
    if "seed" in given:
        for ph in {"pretrain", "finetune"} - set(phases):
            updates[ph] = replace(getattr(cfg, ph), seed=given["seed"])
        updates["gmm"] = replace(cfg.gmm, seed=given["seed"])
    closs = {k: given[k] for k in ("margin", "lam") if k in given}
    if closs:
        updates["contrastive"] = replace(cfg.contrastive, **closs)
    ev = {k: given[k] for k in ("duration_s", "segments", "normalize_dvector") if k in given}
    if "duration_s" in given:
        for ph in phases:
            base = updates.get(ph, getattr(cfg, ph))
            updates[ph] = replace(base, crop_duration_s=given["duration_s"])
    if ev:
        updates["eval"] = replace(cfg.eval, **ev)
    if "num_components" in given:
        updates["gmm"] = replace(updates.get("gmm", cfg.gmm), num_components=given["num_components"])
    try:
        return replace(cfg, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
