"""Diagonal-covariance GMM-UBM with mean-only MAP adaptation."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .audio_io import Manifest
from .errors import (
    CheckpointError,
    DegenerateCluster,
    EmptyTest,
    NoAdaptationData,
    ShapeMismatch,
    TooFewFrames,
)
from .evaluation import ProtocolResult, enrollment_windows, run_trials

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    var_floor: np.ndarray
    loglik_history: list[float] = field(default_factory=list)

    @property
    def num_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component_logpdf(self, X: np.ndarray) -> np.ndarray:
        """``log w_k + log N(x_t | mu_k, diag var_k)``, shape [T, K]."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise ShapeMismatch(f"frames have dim {X.shape[1]}, model {self.dim}")
        prec = 1.0 / self.variances
        # sum_d (x - mu)^2 / var expanded to avoid a [T, K, D] temporary
        quad = (X**2) @ prec.T - 2.0 * X @ (self.means * prec).T + np.sum(self.means**2 * prec, axis=1)
        log_det = np.sum(np.log(self.variances), axis=1)
        with np.errstate(divide="ignore"):
            log_w = np.log(self.weights)
        return log_w - 0.5 * (self.dim * LOG_2PI + log_det + quad)

    def frame_loglik(self, X) -> np.ndarray:
        return logsumexp(self.component_logpdf(X), axis=1)

    def responsibilities(self, X) -> np.ndarray:
        lp = self.component_logpdf(X)
        return np.exp(lp - logsumexp(lp, axis=1, keepdims=True))

    def copy(self) -> "GmmModel":
        return GmmModel(self.weights.copy(), self.means.copy(), self.variances.copy(),
                        self.var_floor.copy(), list(self.loglik_history))


@dataclass(frozen=True)
class GmmConfig:
    num_components: int = 64
    max_iter: int = 100
    tol: float = 1e-5
    relevance_factor: float = 16.0
    floor_ratio: float = 1e-3


def kmeans_pp(X: np.ndarray, K: int, rng: np.random.Generator, lloyd_iters: int = 10):
    """k-means++ seeding followed by a few Lloyd updates; returns labels, centers."""
    n = X.shape[0]
    centers = np.empty((K, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for k in range(1, K):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers[k] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centers[k]) ** 2, axis=1))
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(lloyd_iters):
        dist = (X**2).sum(1)[:, None] - 2 * X @ centers.T + (centers**2).sum(1)[None]
        labels = np.argmin(dist, axis=1)
        counts = np.bincount(labels, minlength=K)
        if np.any(counts == 0):
            raise DegenerateCluster("empty k-means cluster")
        centers = np.stack([X[labels == k].mean(axis=0) for k in range(K)])
    return labels, centers


def _init_from_kmeans(X, K, rng, floor):
    labels, centers = kmeans_pp(X, K, rng)
    weights = np.bincount(labels, minlength=K) / X.shape[0]
    variances = np.stack([X[labels == k].var(axis=0) for k in range(K)])
    return GmmModel(weights, centers, np.maximum(variances, floor), floor)


def _m_step(X, resp, floor):
    nk = resp.sum(axis=0)
    if np.any(nk < 1e-8):
        raise DegenerateCluster("component lost all responsibility")
    means = (resp.T @ X) / nk[:, None]
    variances = (resp.T @ X**2) / nk[:, None] - means**2
    return nk / nk.sum(), means, np.maximum(variances, floor)


def train_ubm(X, K: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-5,
              floor_ratio: float = 1e-3) -> GmmModel:
    """EM from a k-means++ start until the per-frame log-likelihood gain is below ``tol``.

    The variance floor is ``floor_ratio`` times the global per-dimension
    variance. The average log-likelihood after every iteration is kept in
    ``loglik_history``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 10 * K:
        raise TooFewFrames(f"{X.shape[0]} frames for {K} components (need {10 * K})")
    floor = floor_ratio * X.var(axis=0)
    floor = np.where(floor > 0, floor, floor_ratio)
    rng = np.random.default_rng(seed)
    for attempt in range(2):
        try:
            return _em(X, _init_from_kmeans(X, K, rng, floor), floor, max_iter, tol)
        except DegenerateCluster:
            if attempt == 1:
                raise
            log.warning("degenerate cluster, re-seeding once")
    raise AssertionError("unreachable")


def _em(X, model, floor, max_iter, tol):
    prev = float(np.mean(model.frame_loglik(X)))
    model.loglik_history = [prev]
    for it in range(max_iter):
        resp = model.responsibilities(X)
        model.weights, model.means, model.variances = _m_step(X, resp, floor)
        cur = float(np.mean(model.frame_loglik(X)))
        model.loglik_history.append(cur)
        if cur < prev - 1e-9 * max(1.0, abs(prev)):
            log.warning("EM log-likelihood decreased at iteration %d: %g -> %g", it + 1, prev, cur)
        if cur - prev < tol:
            break
        prev = cur
    return model


def map_adapt(ubm: GmmModel, X, relevance_factor: float = 16.0) -> GmmModel:
    """Mean-only MAP: ``mu_k' = a_k E_k[x] + (1 - a_k) mu_k`` with ``a_k = n_k / (n_k + r)``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.size == 0 or X.shape[0] == 0:
        raise NoAdaptationData("no frames to adapt on")
    if relevance_factor <= 0:
        raise ValueError("relevance factor must be positive")
    resp = ubm.responsibilities(X)
    nk = resp.sum(axis=0)
    first = resp.T @ X
    ex = np.divide(first, nk[:, None], out=ubm.means.copy(), where=nk[:, None] > 0)
    alpha = (nk / (nk + relevance_factor))[:, None]
    means = alpha * ex + (1.0 - alpha) * ubm.means
    return GmmModel(ubm.weights.copy(), means, ubm.variances.copy(), ubm.var_floor.copy())


def llr_score(ubm: GmmModel, speaker: GmmModel, X) -> float:
    """Average per-frame log-likelihood ratio of speaker model vs UBM."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0 or X.size == 0:
        raise EmptyTest("no test frames")
    if speaker.num_components != ubm.num_components or speaker.dim != ubm.dim:
        raise ShapeMismatch("speaker model and UBM differ in K or D")
    return float(np.mean(speaker.frame_loglik(X) - ubm.frame_loglik(X)))


def evaluate_gmm_protocol(ubm: GmmModel, manifest: Manifest, trials, features,
                          duration_s: float = 1.0, frames_per_second: float = 100.0,
                          segments_per_utt: int = 1, relevance_factor: float = 16.0) -> ProtocolResult:
    """Same enrollment/trial windows as the LSTM protocol, scored by LLR."""
    num_frames = int(round(duration_s * frames_per_second))
    speakers = {}
    for spk, wins in enrollment_windows(manifest, features, num_frames, segments_per_utt).items():
        if wins:
            speakers[spk] = map_adapt(ubm, np.concatenate(wins), relevance_factor)

    def score_fn(spk, wins):
        return [llr_score(ubm, speakers[spk], w) for w in wins]

    return run_trials(trials, features, num_frames, segments_per_utt, score_fn, set(speakers))


# -- checkpoints -------------------------------------------------------------------

GMM_MAGIC = b"SVGMM1\x00\x00"


def save_gmm(path, model: GmmModel, feature_digest: str = "") -> None:
    """Layout: magic(8) | K u32 | D u32 | digest-len u32 | digest | floor, weights, means, variances (f64 LE)."""
    digest = feature_digest.encode()
    with open(path, "wb") as fh:
        fh.write(GMM_MAGIC)
        fh.write(struct.pack("<III", model.num_components, model.dim, len(digest)))
        fh.write(digest)
        for a in (model.var_floor, model.weights, model.means, model.variances):
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_gmm(path):
    """Returns ``(model, feature_digest)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != GMM_MAGIC:
        raise CheckpointError(f"{path}: not a GMM checkpoint")
    K, D, dlen = struct.unpack("<III", data[8:20])
    digest = data[20 : 20 + dlen].decode()
    body = np.frombuffer(data[20 + dlen :], dtype="<f8")
    if body.size != D + K + 2 * K * D:
        raise CheckpointError(f"{path}: payload size mismatch")
    floor, rest = body[:D], body[D:]
    weights, rest = rest[:K], rest[K:]
    means = rest[: K * D].reshape(K, D)
    variances = rest[K * D :].reshape(K, D)
    return GmmModel(weights.copy(), means.copy(), variances.copy(), floor.copy()), digest

