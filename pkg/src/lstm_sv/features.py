"""Log mel filterbank / MFCC front-end with per-utterance CMVN.

The default geometry is 25 ms Hamming windows at a 10 ms hop (60% overlap)
and 40 filters, which gives a 100 x 40 window for each second of audio.
Framing pads the end of the signal with zeros so that a signal of ``n``
samples yields ``ceil(n / hop)`` frames.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .audio_io import VadConfig, Waveform
from .errors import (
    CacheError,
    ConfigError,
    SampleRateMismatch,
    SignalTooShort,
    TooFewFrames,
    UtteranceTooShort,
)

MODES = ("log_filterbank", "mfcc")
STD_EPS = 1e-12


@dataclass(frozen=True)
class FeatureConfig:
    window_ms: float = 25.0
    hop_ms: float = 10.0
    num_filters: int = 40
    num_ceps: int = 40
    fft_size: int = 512
    mode: str = "log_filterbank"
    log_floor: float = 1e-10
    sample_rate: int = 16000

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.hop_ms < self.window_ms:
            raise ConfigError("need 0 < hop_ms < window_ms")
        if self.num_filters < 1 or self.num_ceps < 1:
            raise ConfigError("num_filters and num_ceps must be positive")
        if self.mode == "mfcc" and self.num_ceps > self.num_filters:
            raise ConfigError("num_ceps cannot exceed num_filters")
        if self.fft_size & (self.fft_size - 1) or self.fft_size < self.window_samples:
            raise ConfigError(
                f"fft_size must be a power of two >= {self.window_samples} samples"
            )
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")

    @property
    def window_samples(self) -> int:
        return int(round(self.window_ms * self.sample_rate / 1000))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000))

    @property
    def frames_per_second(self) -> float:
        return 1000.0 / self.hop_ms

    @property
    def num_coeffs(self) -> int:
        return self.num_ceps if self.mode == "mfcc" else self.num_filters

    def frames_for(self, duration_s: float) -> int:
        return int(round(duration_s * self.frames_per_second))

    def vad(self, threshold_db: float = 30.0, enabled: bool = True) -> VadConfig:
        """A VAD config sharing this front-end's hop."""
        return VadConfig(threshold_db=threshold_db, hop_ms=self.hop_ms, enabled=enabled)


@dataclass(frozen=True)
class FeatureWindow:
    values: np.ndarray
    duration_s: float

    @property
    def shape(self):
        return self.values.shape


def feature_digest(cfg: FeatureConfig, vad: VadConfig | None = None) -> str:
    """Stable hex digest of everything that shapes feature values."""
    payload = {"features": asdict(cfg)}
    if vad is not None:
        payload["vad"] = asdict(vad)
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _check_rate(w: Waveform, cfg: FeatureConfig) -> None:
    if w.sample_rate != cfg.sample_rate:
        raise SampleRateMismatch(
            f"waveform at {w.sample_rate} Hz, front-end configured for {cfg.sample_rate} Hz"
        )


def frame_signal(w: Waveform, cfg: FeatureConfig) -> np.ndarray:
    """Hamming-windowed frames, shape ``[ceil(n / hop), window]``."""
    _check_rate(w, cfg)
    hop, win = cfg.hop_samples, cfg.window_samples
    n = w.samples.size
    if n < hop:
        raise SignalTooShort(f"{n} samples is shorter than one hop ({hop})")
    num_frames = -(-n // hop)
    padded = np.zeros((num_frames - 1) * hop + win)
    padded[:n] = w.samples
    idx = np.arange(num_frames)[:, None] * hop + np.arange(win)[None, :]
    return padded[idx] * np.hamming(win)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def filter_centers(num_filters: int, sample_rate: int) -> np.ndarray:
    """Center frequencies (Hz) of the triangular filters."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), num_filters + 2))
    return edges[1:-1]


def mel_filterbank(num_filters: int, fft_size: int, sample_rate: int) -> np.ndarray:
    """Triangular filters on the rfft bins, shape ``[num_filters, fft_size//2 + 1]``.

    Filter edges are evenly spaced in mel between 0 Hz and Nyquist; each
    triangle peaks at 1 on its center frequency.
    """
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), num_filters + 2))
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def power_spectrum(frames: np.ndarray, fft_size: int) -> np.ndarray:
    return np.abs(np.fft.rfft(frames, n=fft_size, axis=-1)) ** 2


def log_mel_energies(frames: np.ndarray, cfg: FeatureConfig, sample_rate: int) -> np.ndarray:
    fb = mel_filterbank(cfg.num_filters, cfg.fft_size, sample_rate)
    energies = power_spectrum(frames, cfg.fft_size) @ fb.T
    return np.log(np.maximum(energies, cfg.log_floor))


def mfcc(frames: np.ndarray, cfg: FeatureConfig, sample_rate: int) -> np.ndarray:
    logmel = log_mel_energies(frames, cfg, sample_rate)
    return dct(logmel, type=2, norm="ortho", axis=-1)[:, : cfg.num_ceps]


def normalize(m: np.ndarray) -> np.ndarray:
    """Per-column mean and variance normalization (population std).

    Columns whose std is below 1e-12 are only mean-centred.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 2:
        raise TooFewFrames("normalization needs at least 2 frames")
    centred = m - m.mean(axis=0)
    std = centred.std(axis=0)
    scale = np.where(std < STD_EPS, 1.0, std)
    return centred / scale


def raw_features(w: Waveform, cfg: FeatureConfig) -> np.ndarray:
    """Un-normalized coefficients for the whole utterance."""
    frames = frame_signal(w, cfg)
    if cfg.mode == "mfcc":
        return mfcc(frames, cfg, w.sample_rate)
    return log_mel_energies(frames, cfg, w.sample_rate)


def window_at(raw: np.ndarray, start: int, num_frames: int) -> np.ndarray:
    """Normalized slice ``raw[start:start + num_frames]``."""
    if start < 0 or start + num_frames > raw.shape[0]:
        raise UtteranceTooShort(
            f"need frames [{start}, {start + num_frames}) of {raw.shape[0]}"
        )
    return normalize(raw[start : start + num_frames])


def segments(raw: np.ndarray, num_frames: int, limit: int | None = None) -> list[np.ndarray]:
    """Consecutive non-overlapping normalized windows from the start."""
    count = raw.shape[0] // num_frames
    if count == 0:
        raise UtteranceTooShort(f"{raw.shape[0]} frames, need {num_frames}")
    if limit is not None:
        count = min(count, limit)
    return [window_at(raw, k * num_frames, num_frames) for k in range(count)]


def extract_window(w: Waveform, cfg: FeatureConfig, duration_s: float = 1.0) -> FeatureWindow:
    """Normalized features for the first ``duration_s`` seconds of ``w``."""
    _check_rate(w, cfg)
    need = int(round(duration_s * w.sample_rate))
    if w.samples.size < need:
        raise UtteranceTooShort(
            f"{w.duration:.3f} s of audio, {duration_s} s requested"
        )
    raw = raw_features(w, cfg)
    return FeatureWindow(window_at(raw, 0, cfg.frames_for(duration_s)), duration_s)


# -- on-disk cache ---------------------------------------------------------

CACHE_MAGIC = b"SVFEAT1\x00"


def write_cache(path, raw: np.ndarray, digest: str) -> None:
    """Layout: magic(8) | sha256 digest(32) | rows u32 | cols u32 | float32 LE row-major."""
    raw = np.ascontiguousarray(raw, dtype="<f4")
    rows, cols = raw.shape
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(bytes.fromhex(digest))
        fh.write(struct.pack("<II", rows, cols))
        fh.write(raw.tobytes())


def read_cache(path, digest: str | None = None) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:8] != CACHE_MAGIC or len(blob) < 48:
        raise CacheError(f"{path}: not a feature cache")
    stored = blob[8:40].hex()
    if digest is not None and stored != digest:
        raise CacheError(f"{path}: feature digest {stored[:12]} != {digest[:12]}")
    rows, cols = struct.unpack("<II", blob[40:48])
    data = np.frombuffer(blob[48:], dtype="<f4")
    if data.size != rows * cols:
        raise CacheError(f"{path}: truncated payload")
    return data.reshape(rows, cols).astype(np.float64)


def cache_name(audio_path: str) -> str:
    """File name for an utterance's cache entry, unique per full path."""
    tag = hashlib.sha1(str(audio_path).encode()).hexdigest()[:12]
    return f"{Path(audio_path).stem}-{tag}.feat"
