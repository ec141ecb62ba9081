"""Stacked LSTM trunk with exact backpropagation through time.

Everything runs on batches shaped ``[batch, frames, coeffs]`` in float64.
Parameters live in a flat ``name -> array`` dict so the optimizer,
gradient checks and checkpoints can treat them uniformly:

    l{k}.W  [in, 4H]   input weights of layer k, gate order (i, f, o, g)
    l{k}.U  [H, 4H]    recurrent weights
    l{k}.b  [4H]       bias (forget slice starts at 1)
    bn.gamma, bn.beta  [in]   input batch-norm scale / shift (optional)
    head.W  [S, H], head.b [S]  softmax pretraining head (optional)

The embedding of an utterance is the top layer's last hidden state.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (
    CheckpointError,
    EmptyBatch,
    IndexOutOfRange,
    NonFiniteActivation,
    ShapeMismatch,
    StaleCache,
)

BN_EPS = 1e-8
BN_MOMENTUM = 0.99
DIST_EPS = 1e-12


@dataclass(frozen=True)
class LstmConfig:
    input_dim: int = 40
    hidden_dim: int = 300
    num_layers: int = 2

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim, self.num_layers) < 1:
            raise ValueError("LSTM dimensions must be >= 1")


@dataclass(frozen=True)
class ContrastiveConfig:
    margin: float = 1.0
    lam: float = 1e-4

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class LstmModel:
    """Parameters plus batch-norm running statistics."""

    def __init__(self, config: LstmConfig, params: dict, state: dict | None = None):
        self.config = config
        self.params = params
        self.state = state if state is not None else {}
        self.version = 0

    @classmethod
    def init(cls, config: LstmConfig, rng: np.random.Generator, batchnorm: bool = True):
        H = config.hidden_dim
        k = 1.0 / np.sqrt(H)
        params = {}
        state = {}
        if batchnorm:
            params["bn.gamma"] = np.ones(config.input_dim)
            params["bn.beta"] = np.zeros(config.input_dim)
            state["bn.running_mean"] = np.zeros(config.input_dim)
            state["bn.running_var"] = np.ones(config.input_dim)
        for layer in range(config.num_layers):
            d_in = config.input_dim if layer == 0 else H
            params[f"l{layer}.W"] = rng.uniform(-k, k, size=(d_in, 4 * H))
            params[f"l{layer}.U"] = rng.uniform(-k, k, size=(H, 4 * H))
            b = rng.uniform(-k, k, size=4 * H)
            b[H : 2 * H] = 1.0
            params[f"l{layer}.b"] = b
        return cls(config, params, state)

    @property
    def has_head(self) -> bool:
        return "head.W" in self.params

    @property
    def has_bn(self) -> bool:
        return "bn.gamma" in self.params

    @property
    def num_speakers(self) -> int:
        return self.params["head.W"].shape[0] if self.has_head else 0

    def add_head(self, num_speakers: int) -> None:
        # zero init: the untrained model predicts the uniform distribution
        self.params["head.W"] = np.zeros((num_speakers, self.config.hidden_dim))
        self.params["head.b"] = np.zeros(num_speakers)
        self.touch()

    def drop_head(self) -> None:
        self.params.pop("head.W", None)
        self.params.pop("head.b", None)
        self.touch()

    def trunk_weight_names(self) -> list[str]:
        return [
            f"l{k}.{m}" for k in range(self.config.num_layers) for m in ("W", "U")
        ]

    def trainable_names(self, include_head: bool = True) -> list[str]:
        return [n for n in self.params if include_head or not n.startswith("head.")]

    def weight_norm_sq(self) -> float:
        return float(sum(np.sum(self.params[n] ** 2) for n in self.trunk_weight_names()))

    def touch(self) -> None:
        """Mark parameters as modified; invalidates outstanding caches."""
        self.version += 1

    def copy(self) -> "LstmModel":
        clone = LstmModel(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.state.items()},
        )
        return clone

    def update_running_stats(self, stats) -> None:
        if stats is None or not self.has_bn:
            return
        mean, var = stats
        m = BN_MOMENTUM
        self.state["bn.running_mean"] = m * self.state["bn.running_mean"] + (1 - m) * mean
        self.state["bn.running_var"] = m * self.state["bn.running_var"] + (1 - m) * var


# -- batch norm --------------------------------------------------------------


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train: bool):
    """Normalize each coefficient over the batch and time axes.

    Returns the output, a cache for backward, and the batch statistics
    (``None`` in eval mode).
    """
    if train:
        if x.shape[0] < 2:
            from .errors import BatchTooSmall

            raise BatchTooSmall("batch norm in training mode needs >= 2 windows")
        mean = x.mean(axis=(0, 1))
        var = x.var(axis=(0, 1))
        stats = (mean, var)
    else:
        mean, var = running_mean, running_var
        stats = None
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma, train), stats


def batchnorm_backward(dy, cache):
    xhat, inv_std, gamma, train = cache
    dgamma = np.sum(dy * xhat, axis=(0, 1))
    dbeta = np.sum(dy, axis=(0, 1))
    dxhat = dy * gamma
    if not train:
        return dxhat * inv_std, dgamma, dbeta
    n = dy.shape[0] * dy.shape[1]
    dx = (inv_std / n) * (
        n * dxhat
        - dxhat.sum(axis=(0, 1))
        - xhat * np.sum(dxhat * xhat, axis=(0, 1))
    )
    return dx, dgamma, dbeta


# -- LSTM forward / backward ---------------------------------------------------


@dataclass
class ForwardCache:
    version: int
    layers: list = field(default_factory=list)
    bn: tuple | None = None
    bn_stats: tuple | None = None


def _layer_forward(x, W, U, b):
    B, T, _ = x.shape
    H = U.shape[0]
    zx = x @ W + b
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    gates = np.empty((B, T, 4 * H))
    cells = np.empty((B, T + 1, H))
    cells[:, 0] = 0.0
    tanh_c = np.empty((B, T, H))
    hs = np.empty((B, T + 1, H))
    hs[:, 0] = 0.0
    for t in range(T):
        z = zx[:, t] + h @ U
        ifo = sigmoid(z[:, : 3 * H])
        g = np.tanh(z[:, 3 * H :])
        c = ifo[:, H : 2 * H] * c + ifo[:, :H] * g
        tc = np.tanh(c)
        h = ifo[:, 2 * H :] * tc
        gates[:, t, : 3 * H] = ifo
        gates[:, t, 3 * H :] = g
        cells[:, t + 1] = c
        tanh_c[:, t] = tc
        hs[:, t + 1] = h
    return hs, (x, gates, cells, tanh_c, hs)


def _layer_backward(dhs, cache, W, U):
    """``dhs`` is dLoss/dh_t for t = 1..T, shape [B, T, H]."""
    x, gates, cells, tanh_c, hs = cache
    B, T, H = dhs.shape
    dz_all = np.empty((B, T, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        i = gates[:, t, :H]
        f = gates[:, t, H : 2 * H]
        o = gates[:, t, 2 * H : 3 * H]
        g = gates[:, t, 3 * H :]
        tc = tanh_c[:, t]
        dh = dhs[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = dz_all[:, t]
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H : 2 * H] = dc * cells[:, t] * f * (1.0 - f)
        dz[:, 2 * H : 3 * H] = dh * tc * o * (1.0 - o)
        dz[:, 3 * H :] = dc * i * (1.0 - g * g)
        dc_next = dc * f
        dh_next = dz @ U.T
    flat_dz = dz_all.reshape(B * T, 4 * H)
    dW = x.reshape(B * T, -1).T @ flat_dz
    dU = hs[:, :-1].reshape(B * T, H).T @ flat_dz
    db = flat_dz.sum(axis=0)
    dx = dz_all @ W.T
    return dx, dW, dU, db


def _as_batch(x) -> np.ndarray:
    x = np.asarray(getattr(x, "values", x), dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ShapeMismatch(f"expected [batch, frames, coeffs], got shape {x.shape}")
    return x


def forward_batch(model: LstmModel, X, train: bool = False):
    """Embeddings ``[B, H]`` for a batch of windows, plus the BPTT cache.

    ``train`` selects batch statistics (and records them) in the input
    batch norm; otherwise running statistics are used.
    """
    X = _as_batch(X)
    cfg = model.config
    if X.shape[2] != cfg.input_dim:
        raise ShapeMismatch(f"window has {X.shape[2]} coeffs, model expects {cfg.input_dim}")
    if X.shape[1] < 1:
        raise ShapeMismatch("empty sequence")
    p = model.params
    cache = ForwardCache(model.version)
    h = X
    if model.has_bn:
        h, cache.bn, cache.bn_stats = batchnorm_forward(
            X,
            p["bn.gamma"],
            p["bn.beta"],
            model.state["bn.running_mean"],
            model.state["bn.running_var"],
            train,
        )
    for k in range(cfg.num_layers):
        hs, lc = _layer_forward(h, p[f"l{k}.W"], p[f"l{k}.U"], p[f"l{k}.b"])
        cache.layers.append(lc)
        h = hs[:, 1:]
    emb = h[:, -1].copy()
    if not np.all(np.isfinite(emb)):
        raise NonFiniteActivation("non-finite embedding")
    return emb, cache


def backward_batch(model: LstmModel, cache: ForwardCache, d_emb: np.ndarray) -> dict:
    """Gradients of all trunk (and batch-norm) parameters given dLoss/d_embedding."""
    if cache.version != model.version:
        raise StaleCache("parameters changed since this forward pass")
    p = model.params
    grads = {}
    top = cache.layers[-1]
    B, T = top[0].shape[:2]
    dhs = np.zeros((B, T, model.config.hidden_dim))
    dhs[:, -1] = d_emb
    for k in range(model.config.num_layers - 1, -1, -1):
        dx, dW, dU, db = _layer_backward(dhs, cache.layers[k], p[f"l{k}.W"], p[f"l{k}.U"])
        grads[f"l{k}.W"], grads[f"l{k}.U"], grads[f"l{k}.b"] = dW, dU, db
        dhs = dx
    if cache.bn is not None:
        _, grads["bn.gamma"], grads["bn.beta"] = batchnorm_backward(dhs, cache.bn)
    return grads


def forward(model: LstmModel, x):
    """Embedding of a single window (eval-mode batch norm) and its cache."""
    emb, cache = forward_batch(model, x, train=False)
    return emb[0], cache


def embed(model: LstmModel, windows, batch_size: int = 64) -> np.ndarray:
    """Eval-mode embeddings for a list of windows, in order."""
    windows = [getattr(w, "values", w) for w in windows]
    out = []
    for s in range(0, len(windows), batch_size):
        emb, _ = forward_batch(model, np.stack(windows[s : s + batch_size]), train=False)
        out.append(emb)
    return np.concatenate(out) if out else np.zeros((0, model.config.hidden_dim))


# -- losses --------------------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class SoftmaxContext:
    cache: ForwardCache
    emb: np.ndarray
    probs: np.ndarray
    labels: np.ndarray


def softmax_forward(model: LstmModel, X, labels, train: bool = False):
    """Mean cross-entropy of the speaker-classification head over a batch."""
    if not model.has_head:
        raise IndexOutOfRange("model has no softmax head")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    S = model.num_speakers
    if labels.size == 0:
        raise EmptyBatch("no windows")
    if labels.min() < 0 or labels.max() >= S:
        raise IndexOutOfRange(f"speaker index outside [0, {S})")
    emb, cache = forward_batch(model, X, train=train)
    logits = emb @ model.params["head.W"].T + model.params["head.b"]
    logp = log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(labels.size), labels]))
    return loss, SoftmaxContext(cache, emb, np.exp(logp), labels)


def softmax_loss(model: LstmModel, x, speaker_index: int, num_speakers: int) -> float:
    if num_speakers != model.num_speakers:
        raise IndexOutOfRange(f"head has {model.num_speakers} rows, not {num_speakers}")
    loss, _ = softmax_forward(model, x, [speaker_index])
    return loss


@dataclass
class ContrastiveContext:
    cache: ForwardCache
    e1: np.ndarray
    e2: np.ndarray
    dist: np.ndarray
    labels: np.ndarray
    cfg: ContrastiveConfig


def pair_losses(dist: np.ndarray, labels: np.ndarray, margin: float) -> np.ndarray:
    hinge = np.maximum(0.0, margin - dist)
    return labels * 0.5 * dist**2 + (1.0 - labels) * 0.5 * hinge**2


def contrastive_forward(model: LstmModel, X1, X2, labels, cfg: ContrastiveConfig, train=False):
    """Mean contrastive loss over pairs plus ``lam * sum(w**2)`` on trunk weights.

    Both branches run through the same parameters in one stacked batch.
    ``labels`` is 1 for genuine pairs and 0 for impostor pairs.
    """
    X1, X2 = _as_batch(X1), _as_batch(X2)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if labels.size == 0 or X1.shape[0] == 0:
        raise EmptyBatch("no pairs")
    if X1.shape != X2.shape or X1.shape[0] != labels.size:
        raise ShapeMismatch("pair windows and labels disagree in shape")
    n = labels.size
    emb, cache = forward_batch(model, np.concatenate([X1, X2]), train=train)
    e1, e2 = emb[:n], emb[n:]
    dist = np.sqrt(np.sum((e1 - e2) ** 2, axis=1))
    loss = float(np.mean(pair_losses(dist, labels, cfg.margin)))
    loss += cfg.lam * model.weight_norm_sq()
    return loss, ContrastiveContext(cache, e1, e2, dist, labels, cfg)


def contrastive_loss(batch, model: LstmModel, cfg: ContrastiveConfig) -> float:
    """Loss for a list of ``(x1, x2, y)`` pairs."""
    if len(batch) == 0:
        raise EmptyBatch("no pairs")
    X1 = np.stack([getattr(a, "values", a) for a, _, _ in batch])
    X2 = np.stack([getattr(b, "values", b) for _, b, _ in batch])
    loss, _ = contrastive_forward(model, X1, X2, [y for _, _, y in batch], cfg)
    return loss


def pair_distance(model: LstmModel, x1, x2) -> float:
    e1, _ = forward(model, x1)
    e2, _ = forward(model, x2)
    return float(np.sqrt(np.sum((e1 - e2) ** 2)))


def backward(model: LstmModel, ctx) -> dict:
    """Exact gradients of the loss that produced ``ctx``."""
    if isinstance(ctx, SoftmaxContext):
        n = ctx.labels.size
        dlogits = ctx.probs.copy()
        dlogits[np.arange(n), ctx.labels] -= 1.0
        dlogits /= n
        grads = backward_batch(model, ctx.cache, dlogits @ model.params["head.W"])
        grads["head.W"] = dlogits.T @ ctx.emb
        grads["head.b"] = dlogits.sum(axis=0)
        return grads
    if isinstance(ctx, ContrastiveContext):
        n = ctx.labels.size
        y, d, m = ctx.labels, ctx.dist, ctx.cfg.margin
        diff = ctx.e1 - ctx.e2
        # d/d(e1) of y*D^2/2 is y*diff; the hinge term goes through D
        hinge = np.maximum(0.0, m - d)
        coef = y - (1.0 - y) * hinge / np.maximum(d, DIST_EPS)
        d_e1 = (coef[:, None] * diff) / n
        grads = backward_batch(model, ctx.cache, np.concatenate([d_e1, -d_e1]))
        for name in model.trunk_weight_names():
            grads[name] = grads[name] + 2.0 * ctx.cfg.lam * model.params[name]
        return grads
    raise TypeError(f"unknown loss context {type(ctx).__name__}")


# -- checkpoints ---------------------------------------------------------------

CKPT_MAGIC = b"SVLSTM1\x00"
CKPT_VERSION = 1


def save_checkpoint(path, model: LstmModel, feature_digest: str, meta: dict | None = None):
    """Layout: magic(8) | version u32 | header-len u32 | JSON header | float64 LE arrays."""
    arrays = list(model.params.items()) + list(model.state.items())
    header = {
        "lstm": asdict(model.config),
        "feature_digest": feature_digest,
        "head": model.has_head,
        "batchnorm": model.has_bn,
        "arrays": [[name, list(a.shape)] for name, a in arrays],
        "state": list(model.state),
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(model, feature_digest, meta)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not an LSTM checkpoint")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(data[16 : 16 + hlen])
    offset = 16 + hlen
    params, state = {}, {}
    state_names = set(header["state"])
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError(f"{path}: truncated at {name}")
        arr = np.frombuffer(data[offset:end], dtype="<f8").reshape(shape).copy()
        (state if name in state_names else params)[name] = arr
        offset = end
    model = LstmModel(LstmConfig(**header["lstm"]), params, state)
    return model, header["feature_digest"], header["meta"]
