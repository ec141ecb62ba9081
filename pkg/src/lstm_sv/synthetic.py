"""Synthetic multi-speaker corpus for tests and desk-scale experiments.

Each speaker is a source-filter voice: a harmonic source with its own
pitch, pitch glide and syllable rhythm, shaped by vowel formants scaled
by a per-speaker vocal-tract factor. Vowels are drawn at random per
syllable, so content varies between utterances of the same speaker.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio_io import Entry, Waveform, format_manifest, write_wav
from .evaluation import Trial, format_trials

VOWELS = np.array([
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
])
BANDWIDTHS = np.array([90.0, 110.0, 160.0])


@dataclass(frozen=True)
class Voice:
    f0: float
    tract_scale: float
    syllable_rate: float
    glide: float
    tilt: float


def random_voice(rng: np.random.Generator) -> Voice:
    return Voice(
        f0=float(rng.uniform(100.0, 220.0)),
        tract_scale=float(rng.uniform(0.85, 1.15)),
        syllable_rate=float(rng.uniform(3.0, 6.0)),
        glide=float(rng.uniform(-0.4, 0.4)),
        tilt=float(rng.uniform(0.6, 1.4)),
    )


def _formant_gain(freqs: np.ndarray, formants: np.ndarray) -> np.ndarray:
    gain = np.zeros_like(freqs)
    for f, bw in zip(formants, BANDWIDTHS):
        gain += 1.0 / (1.0 + ((freqs - f) / bw) ** 2)
    return gain


def synthesize(voice: Voice, duration: float, rng: np.random.Generator,
               sample_rate: int = 16000, pad: float = 0.2, noise_db: float = -50.0) -> Waveform:
    """One utterance of ``duration`` seconds of voicing plus ``pad`` s of noise each side."""
    n_speech = int(round(duration * sample_rate))
    speech = np.zeros(n_speech)
    jitter = 1.0 + rng.normal(0.0, 0.03)
    pos = 0
    while pos < n_speech:
        n = int(sample_rate / voice.syllable_rate * rng.uniform(0.8, 1.2))
        n = min(n, n_speech - pos)
        tau = np.arange(n) / max(n, 1)
        f0 = voice.f0 * jitter * (1.0 + voice.glide * (tau - 0.5))
        phase = 2 * np.pi * np.cumsum(f0) / sample_rate + rng.uniform(0, 2 * np.pi)
        formants = VOWELS[rng.integers(len(VOWELS))] * voice.tract_scale
        formants = formants * rng.uniform(0.95, 1.05, size=3)
        nharm = int((sample_rate / 2 - 100) // (voice.f0 * 1.5))
        h = np.arange(1, nharm + 1)[:, None]
        freqs = h * f0[None, :]
        amp = _formant_gain(freqs, formants) / h**voice.tilt
        amp = np.where(freqs < sample_rate / 2, amp, 0.0)
        envelope = 0.15 + 0.85 * np.sin(np.pi * tau) ** 2
        speech[pos : pos + n] = envelope * np.sum(amp * np.sin(h * phase[None, :]), axis=0)
        pos += n
    speech *= 0.5 / np.max(np.abs(speech))
    n_pad = int(round(pad * sample_rate))
    out = np.concatenate([np.zeros(n_pad), speech, np.zeros(n_pad)])
    out += rng.normal(0.0, 10 ** (noise_db / 20), size=out.size)
    return Waveform(np.clip(out, -1.0, 1.0), sample_rate)


def split_for(index: int, n_utts: int, n_enroll: int, n_eval: int) -> str:
    n_dev = n_utts - n_enroll - n_eval
    if index < n_dev:
        return "dev"
    return "enroll" if index < n_dev + n_enroll else "eval"


def make_corpus(out_dir, num_speakers: int = 5, utts_per_speaker: int = 20, duration: float = 3.0,
                seed: int = 0, num_enroll: int = 4, num_eval: int = 6, sample_rate: int = 16000):
    """Write WAVs, ``manifest.tsv`` and ``trials.tsv`` (every eval utterance
    against every speaker) under ``out_dir``; returns the manifest path."""
    if num_enroll < 1 or num_eval < 1 or utts_per_speaker - num_enroll - num_eval < 1:
        raise ValueError("need at least one dev, enroll and eval utterance per speaker")
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    voices = [random_voice(rng) for _ in range(num_speakers)]
    entries = []
    for s, voice in enumerate(voices):
        spk = f"S{s:02d}"
        for u in range(utts_per_speaker):
            path = out / "wav" / f"{spk}_{u:02d}.wav"
            write_wav(path, synthesize(voice, duration, rng, sample_rate))
            entries.append(Entry(str(path), spk, split_for(u, utts_per_speaker, num_enroll, num_eval)))
    (out / "manifest.tsv").write_text(format_manifest(entries, relative_to=out))
    speakers = [f"S{s:02d}" for s in range(num_speakers)]
    trials = [
        Trial(spk, e.path, "target" if spk == e.speaker else "nontarget")
        for e in entries if e.split == "eval" for spk in speakers
    ]
    (out / "trials.tsv").write_text(format_trials(trials, relative_to=out))
    return out / "manifest.tsv"
