import numpy as np
import pytest

from lstm_sv.audio_io import Waveform


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sine(freq, seconds, rate=16000, amp=0.5, phase=0.0):
    t = np.arange(int(round(seconds * rate))) / rate
    return Waveform(amp * np.sin(2 * np.pi * freq * t + phase), rate)


def factor_speakers(n_speakers=5, n_utts=6, frames=60, dim=8, seed=0, strength=6.0):
    """Raw feature matrices where each speaker has its own loading direction.

    Frame t of speaker k is ``z_t * v_k + noise``; the direction ``v_k``
    survives per-window mean/variance normalization.
    """
    g = np.random.default_rng(seed)
    dirs = g.normal(size=(n_speakers, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    groups = {}
    for k in range(n_speakers):
        utts = []
        for _ in range(n_utts):
            z = g.normal(size=(frames, 1)) * strength
            utts.append(z * dirs[k] + g.normal(size=(frames, dim)))
        groups[f"spk{k}"] = utts
    return groups


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
