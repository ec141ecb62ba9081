"""Audio loading, energy VAD and dataset manifests."""

from __future__ import annotations

import wave
from collections import Counter, OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    AllSilent,
    DuplicatePath,
    EmptyAudio,
    MalformedHeader,
    ParseError,
    SpeakerWithSingleDevUtterance,
    UnsupportedEncoding,
)

SPLITS = ("dev", "enroll", "eval")
PCM16_SCALE = 32768.0


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise EmptyAudio("waveform has no samples")
        if self.sample_rate <= 0:
            raise MalformedHeader(f"bad sample rate {self.sample_rate}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def scaled(self, factor: float) -> "Waveform":
        return Waveform(self.samples * factor, self.sample_rate)


def load_wav(path) -> Waveform:
    """Read a mono PCM16 RIFF/WAVE file into floats in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise UnsupportedEncoding(f"{path}: {msg}") from exc
        raise MalformedHeader(f"{path}: {msg}") from exc
    except EOFError as exc:
        raise MalformedHeader(f"{path}: truncated header") from exc
    if channels != 1:
        raise UnsupportedEncoding(f"{path}: {channels} channels, expected mono")
    if width != 2:
        raise UnsupportedEncoding(f"{path}: {8 * width}-bit samples, expected 16-bit")
    if rate <= 0:
        raise MalformedHeader(f"{path}: sample rate {rate}")
    pcm = np.frombuffer(raw, dtype="<i2")
    if pcm.size == 0:
        raise EmptyAudio(f"{path}: no samples")
    return Waveform(pcm.astype(np.float64) / PCM16_SCALE, rate)


def quantize(samples: np.ndarray) -> np.ndarray:
    """Float samples -> int16 PCM with clipping."""
    scaled = np.round(np.asarray(samples, dtype=np.float64) * PCM16_SCALE)
    return np.clip(scaled, -32768, 32767).astype("<i2")


def write_wav(path, w: Waveform) -> None:
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(quantize(w.samples).tobytes())


@dataclass(frozen=True)
class VadConfig:
    threshold_db: float = 30.0
    hop_ms: float = 10.0
    enabled: bool = True

    def __post_init__(self):
        if self.threshold_db <= 0:
            raise ValueError("threshold_db must be positive")
        if self.hop_ms <= 0:
            raise ValueError("hop_ms must be positive")


def block_powers(samples: np.ndarray, hop: int) -> np.ndarray:
    """Mean-square power of consecutive non-overlapping hop-sized blocks.

    The last block may be partial; its power is averaged over the samples
    it actually has.
    """
    n = samples.size
    nblocks = -(-n // hop)
    padded = np.zeros(nblocks * hop)
    padded[:n] = samples
    sums = (padded.reshape(nblocks, hop) ** 2).sum(axis=1)
    counts = np.full(nblocks, hop, dtype=np.float64)
    counts[-1] = n - (nblocks - 1) * hop
    return sums / counts


def apply_vad(w: Waveform, cfg: VadConfig) -> Waveform:
    """Drop hop-sized blocks more than ``threshold_db`` below the loudest block.

    Energies are measured on non-overlapping blocks at the feature hop so
    that surviving audio is an exact concatenation of input samples and a
    second pass removes nothing.
    """
    if not cfg.enabled:
        return w
    hop = int(round(cfg.hop_ms * w.sample_rate / 1000))
    power = block_powers(w.samples, hop)
    peak = power.max()
    if peak <= 0.0:
        raise AllSilent("no frame above the energy threshold")
    with np.errstate(divide="ignore"):
        rel_db = 10.0 * np.log10(power / peak)
    keep = rel_db >= -cfg.threshold_db
    starts = np.flatnonzero(keep) * hop
    pieces = [w.samples[s : s + hop] for s in starts]
    return Waveform(np.concatenate(pieces), w.sample_rate)


@dataclass(frozen=True)
class Entry:
    path: str
    speaker: str
    split: str


@dataclass
class Manifest:
    entries: list[Entry]

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        seen: set[str] = set()
        for e in self.entries:
            if not e.speaker:
                raise ParseError(f"empty speaker id for {e.path}")
            if e.split not in SPLITS:
                raise ParseError(f"unknown split {e.split!r} for {e.path}")
            if e.path in seen:
                raise DuplicatePath(e.path)
            seen.add(e.path)
        counts = Counter(e.speaker for e in self.entries if e.split == "dev")
        lonely = sorted(s for s, c in counts.items() if c < 2)
        if lonely:
            raise SpeakerWithSingleDevUtterance(
                f"dev speakers with one utterance: {', '.join(lonely)}"
            )

    def split(self, name: str) -> list[Entry]:
        return [e for e in self.entries if e.split == name]

    def speakers(self, split: str | None = None) -> list[str]:
        """Speaker ids in order of first appearance."""
        out: OrderedDict[str, None] = OrderedDict()
        for e in self.entries:
            if split is None or e.split == split:
                out[e.speaker] = None
        return list(out)

    def by_speaker(self, split: str) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = OrderedDict()
        for e in self.split(split):
            groups.setdefault(e.speaker, []).append(e.path)
        return groups

    def speaker_of(self, path: str) -> str:
        for e in self.entries:
            if e.path == path:
                return e.speaker
        raise KeyError(path)


def parse_manifest(text: str, base_dir=None, prefix: str | None = None) -> Manifest:
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = line.rstrip("\r\n").split("\t")
        if len(fields) != 3:
            raise ParseError(f"expected 3 tab-separated fields, got {len(fields)}", lineno)
        path, speaker, split = (f.strip() for f in fields)
        if not speaker:
            raise ParseError("empty speaker id", lineno)
        if split not in SPLITS:
            raise ParseError(f"split must be one of {SPLITS}, got {split!r}", lineno)
        if base_dir is not None and not Path(path).is_absolute():
            path = str(Path(base_dir) / path)
        entries.append(Entry(path, speaker, split))
    if prefix:
        entries = [_apply_prefix(e, prefix) for e in entries]
    return Manifest(entries)


def _apply_prefix(e: Entry, prefix: str) -> Entry:
    if e.speaker.startswith(prefix):
        # evaluation identities keep explicit enrollment material
        split = "enroll" if e.split == "enroll" else "eval"
    else:
        split = "dev"
    return Entry(e.path, e.speaker, split)


def resolve_manifest(path, filter_rule: str | None = None) -> Manifest:
    """Read a ``path<TAB>speaker<TAB>split`` manifest.

    Relative audio paths are resolved against the manifest's directory.
    ``filter_rule`` is a speaker-id prefix: matching speakers become
    evaluation identities, all others development.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_manifest(text, base_dir=path.parent, prefix=filter_rule)


def format_manifest(entries, relative_to=None) -> str:
    lines = []
    for e in entries:
        p = e.path
        if relative_to is not None:
            try:
                p = str(Path(p).relative_to(relative_to))
            except ValueError:
                pass
        lines.append(f"{p}\t{e.speaker}\t{e.split}")
    return "\n".join(lines) + "\n"
