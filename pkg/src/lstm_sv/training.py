"""Softmax pretraining and siamese fine-tuning with impostor-pair filtering."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NoGenuinePairs, NoPairsSurvive, UtteranceTooShort
from .features import window_at
from .network import (
    ContrastiveConfig,
    LstmModel,
    backward,
    batchnorm_forward,
    contrastive_forward,
    embed,
    pair_losses,
    softmax_forward,
)

log = logging.getLogger(__name__)

SELECT_EPS = 1e-9
PHASES = ("pretrain", "finetune")


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "pretrain"
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 20
    seed: int = 0
    crop_duration_s: float = 1.0
    pair_selection: bool = True
    th0: float = 0.5
    batchnorm: bool = True
    crops_per_speaker: int = 6
    clip_norm: float | None = 5.0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.batch_size < 1 or (self.phase == "finetune" and self.batch_size < 2):
            raise ConfigError("batch_size must be >= 2 for finetune")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.pair_selection and not self.th0 > 0:
            raise ConfigError("th0 must be positive when pair selection is on")
        if self.crop_duration_s <= 0:
            raise ConfigError("crop_duration_s must be positive")
        if self.crops_per_speaker < 2:
            raise ConfigError("crops_per_speaker must be >= 2")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive or None")


@dataclass
class TrainData:
    """Development utterances as un-normalized feature matrices."""

    speakers: list[str]
    labels: np.ndarray
    utterances: list[np.ndarray]
    frames_per_second: float = 100.0

    @classmethod
    def from_groups(cls, groups: dict[str, list[np.ndarray]], frames_per_second: float = 100.0):
        speakers = list(groups)
        labels, utts = [], []
        for k, spk in enumerate(speakers):
            for raw in groups[spk]:
                labels.append(k)
                utts.append(raw)
        return cls(speakers, np.array(labels, dtype=np.int64), utts, frames_per_second)

    def by_speaker(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == k) for k in range(len(self.speakers))]


def random_crop(raw: np.ndarray, num_frames: int, rng: np.random.Generator):
    """Uniformly placed normalized window of ``num_frames``; returns ``(window, start)``."""
    slack = raw.shape[0] - num_frames
    if slack < 0:
        raise UtteranceTooShort(f"{raw.shape[0]} frames, crop needs {num_frames}")
    start = int(rng.integers(0, slack + 1))
    return window_at(raw, start, num_frames), start


def batch_normalize(X, gamma, beta, running_mean, running_var, train=True):
    """Per-coefficient normalization over batch and time; returns ``(Y, batch_stats)``."""
    y, _, stats = batchnorm_forward(np.asarray(X, dtype=np.float64), gamma, beta,
                                    running_mean, running_var, train)
    return y, stats


class SGD:
    """Momentum SGD on a model's parameter dict."""

    def __init__(self, model: LstmModel, lr: float, momentum: float, clip_norm=None):
        self.model = model
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = {k: np.zeros_like(v) for k, v in model.params.items()}

    def step(self, grads: dict) -> float:
        norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        for name, g in grads.items():
            v = self.velocity[name]
            v *= self.momentum
            v -= self.lr * scale * g
            self.model.params[name] += v
        self.model.touch()
        return norm


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    if order.size == 0:
        return []
    count = -(-order.size // batch_size)
    return [b for b in np.array_split(order, count) if b.size]


def pretrain(model: LstmModel, data: TrainData, cfg: TrainConfig, rng=None) -> list[dict]:
    """Speaker-classification pretraining on random crops.

    Adds a softmax head sized to the development speakers if the model has
    none. Returns one log row per epoch.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    if not model.has_head or model.num_speakers != len(data.speakers):
        model.add_head(len(data.speakers))
    opt = SGD(model, cfg.learning_rate, cfg.momentum, cfg.clip_norm)
    n_frames = _crop_frames(cfg, data)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        crops = np.stack([random_crop(raw, n_frames, rng)[0] for raw in data.utterances])
        order = rng.permutation(len(crops))
        total = 0.0
        for idx in _batches(order, cfg.batch_size):
            loss, ctx = softmax_forward(model, crops[idx], data.labels[idx], train=True)
            grads = backward(model, ctx)
            opt.step(grads)
            model.update_running_stats(ctx.cache.bn_stats)
            total += loss * idx.size
        row = {"epoch": epoch, "phase": "pretrain", "loss": total / len(crops),
               "genuine_mean_D": None, "impostor_mean_D": None, "discard_rate": None}
        log.info("pretrain epoch %d loss %.4f", epoch, row["loss"])
        history.append(row)
    return history


def _crop_frames(cfg: TrainConfig, data: TrainData) -> int:
    return int(round(cfg.crop_duration_s * data.frames_per_second))


@dataclass
class PairPool:
    """Crops plus candidate pairs ``(i, j, y)`` indexing into them."""

    windows: np.ndarray
    speaker: np.ndarray
    source: np.ndarray
    pairs: np.ndarray
    distances: np.ndarray | None = None

    @property
    def labels(self) -> np.ndarray:
        return self.pairs[:, 2]


def build_pair_pool(data: TrainData, num_frames: int, crops_per_speaker: int, rng) -> PairPool:
    """Random crops per speaker, every genuine pair, and as many impostor pairs.

    Genuine pairs only join crops from different utterances; impostors are
    drawn uniformly without replacement from all cross-speaker crop pairs.
    """
    windows, speaker, source = [], [], []
    for k, utt_idx in enumerate(data.by_speaker()):
        reps = -(-crops_per_speaker // utt_idx.size)
        picks = np.concatenate([rng.permutation(utt_idx) for _ in range(reps)])
        for u in picks[:crops_per_speaker]:
            windows.append(random_crop(data.utterances[u], num_frames, rng)[0])
            speaker.append(k)
            source.append(u)
    speaker = np.array(speaker)
    source = np.array(source)
    ii, jj = np.triu_indices(len(windows), k=1)
    same = speaker[ii] == speaker[jj]
    genuine = np.flatnonzero(same & (source[ii] != source[jj]))
    cross = np.flatnonzero(~same)
    if genuine.size == 0:
        raise NoGenuinePairs("no speaker has crops from two utterances")
    take = min(genuine.size, cross.size)
    impostor = np.sort(rng.choice(cross, size=take, replace=False))
    pairs = np.concatenate([
        np.column_stack([ii[genuine], jj[genuine], np.ones(genuine.size, dtype=np.int64)]),
        np.column_stack([ii[impostor], jj[impostor], np.zeros(take, dtype=np.int64)]),
    ])
    return PairPool(np.stack(windows), speaker, source, pairs)


def pool_distances(pool: PairPool, model: LstmModel) -> np.ndarray:
    emb = embed(model, pool.windows)
    i, j = pool.pairs[:, 0], pool.pairs[:, 1]
    pool.distances = np.sqrt(np.sum((emb[i] - emb[j]) ** 2, axis=1))
    return pool.distances


@dataclass
class Selection:
    keep: np.ndarray
    threshold: float
    max_gen: float
    min_gen: float
    discarded: int


def filter_pairs(distances, labels, th0: float) -> Selection:
    """Drop impostor pairs farther than ``max_gen + th0 * |max_gen / min_gen|``.

    ``max_gen``/``min_gen`` are the extreme genuine-pair distances; genuine
    pairs are always kept.
    """
    distances = np.asarray(distances, dtype=np.float64)
    labels = np.asarray(labels)
    gen = distances[labels == 1]
    if gen.size == 0:
        raise NoGenuinePairs("pair selection needs at least one genuine pair")
    max_gen, min_gen = float(gen.max()), float(gen.min())
    th = th0 * abs(max_gen / max(min_gen, SELECT_EPS))
    drop = (labels == 0) & (distances > max_gen + th)
    return Selection(~drop, th, max_gen, min_gen, int(drop.sum()))


def select_pairs(pool: PairPool, model: LstmModel, th0: float) -> Selection:
    """Distances under the frozen model, then the impostor filter."""
    frozen = model.version
    distances = pool_distances(pool, model)
    assert model.version == frozen
    return filter_pairs(distances, pool.labels, th0)


def finetune(model: LstmModel, data: TrainData, cfg: TrainConfig,
             closs: ContrastiveConfig, rng=None) -> list[dict]:
    """Contrastive fine-tuning of the shared trunk; drops any softmax head."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    model.drop_head()
    opt = SGD(model, cfg.learning_rate, cfg.momentum, cfg.clip_norm)
    n_frames = _crop_frames(cfg, data)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        pool = build_pair_pool(data, n_frames, cfg.crops_per_speaker, rng)
        labels = pool.labels
        if cfg.pair_selection:
            sel = select_pairs(pool, model, cfg.th0)
            keep, discarded = sel.keep, sel.discarded
        else:
            pool_distances(pool, model)
            keep, discarded = np.ones(labels.size, dtype=bool), 0
        n_imp = int(np.sum(labels == 0))
        kept = np.flatnonzero(keep)
        if kept.size == 0:
            raise NoPairsSurvive(f"epoch {epoch}: pair pool is empty after selection")
        if np.any(keep & (labels == 0)):
            total = 0.0
            order = kept[rng.permutation(kept.size)]
            for idx in _batches(order, cfg.batch_size):
                p = pool.pairs[idx]
                loss, ctx = contrastive_forward(
                    model, pool.windows[p[:, 0]], pool.windows[p[:, 1]], p[:, 2], closs, train=True
                )
                grads = backward(model, ctx)
                opt.step(grads)
                model.update_running_stats(ctx.cache.bn_stats)
                total += loss * idx.size
            epoch_loss = total / kept.size
        else:
            # every impostor is already far outside the genuine range; a
            # genuine-only update would just contract the space
            log.warning("finetune epoch %d: all impostor pairs discarded, no update", epoch)
            d = pool.distances[kept]
            epoch_loss = float(np.mean(pair_losses(d, labels[kept], closs.margin)))
            epoch_loss += closs.lam * model.weight_norm_sq()
        d = pool.distances
        row = {
            "epoch": epoch,
            "phase": "finetune",
            "loss": epoch_loss,
            "genuine_mean_D": float(d[labels == 1].mean()),
            "impostor_mean_D": float(d[labels == 0].mean()),
            "discard_rate": discarded / n_imp if n_imp else 0.0,
        }
        log.info("finetune epoch %d loss %.4f gen %.3f imp %.3f discard %.2f", epoch,
                 row["loss"], row["genuine_mean_D"], row["impostor_mean_D"], row["discard_rate"])
        history.append(row)
    return history


LOG_FIELDS = ("epoch", "phase", "loss", "genuine_mean_D", "impostor_mean_D", "discard_rate")


def format_log(history: list[dict]) -> str:
    lines = [",".join(LOG_FIELDS)]
    for row in history:
        cells = []
        for key in LOG_FIELDS:
            v = row[key]
            cells.append("" if v is None else (repr(float(v)) if isinstance(v, float) else str(v)))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
