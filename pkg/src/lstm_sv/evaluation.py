"""d-vector enrollment, trial scoring and equal error rate."""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .audio_io import Manifest
from .errors import (
    EmptyScoreList,
    MissingEnrollment,
    NoEnrollmentData,
    ParseError,
    UtteranceTooShort,
)
from .features import segments
from .network import LstmModel, embed

LABELS = ("target", "nontarget")


@dataclass(frozen=True)
class SpeakerModel:
    speaker_id: str
    dvector: np.ndarray
    num_enroll_utterances: int
    normalized: bool = False


@dataclass(frozen=True)
class Trial:
    claimed_speaker: str
    test_path: str
    label: str

    @property
    def is_target(self) -> bool:
        return self.label == "target"


@dataclass(frozen=True)
class EerResult:
    eer: float
    threshold: float
    num_target: int
    num_nontarget: int


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(norm, 1e-12)


def enroll(model: LstmModel, utterances, speaker_id: str, normalize: bool = False) -> SpeakerModel:
    """Average the embeddings of the enrollment windows."""
    if len(utterances) == 0:
        raise NoEnrollmentData(f"no enrollment windows for {speaker_id}")
    emb = embed(model, utterances)
    if normalize:
        emb = _unit(emb)
    return SpeakerModel(speaker_id, emb.mean(axis=0), len(utterances), normalize)


def score_embeddings(speaker: SpeakerModel, emb: np.ndarray) -> np.ndarray:
    if speaker.normalized:
        emb = _unit(emb)
    return -np.sqrt(np.sum((emb - speaker.dvector) ** 2, axis=-1))


def score(model: LstmModel, speaker: SpeakerModel, test) -> float:
    """Negative Euclidean distance between the test embedding and the d-vector."""
    emb = embed(model, [test])[0]
    return float(score_embeddings(speaker, emb))


def compute_eer(target_scores, nontarget_scores) -> EerResult:
    """EER from the FRR/FAR crossing over all observed score thresholds.

    At threshold t a trial is accepted when its score is >= t, so
    FRR(t) = #(target < t) / n_t and FAR(t) = #(nontarget >= t) / n_n.
    The thresholds are the sorted unique scores followed by +inf. Between
    the last point with FRR < FAR and the first with FRR >= FAR the two
    curves are interpolated linearly; the crossing is evaluated in exact
    rational arithmetic.
    """
    tgt = np.sort(np.asarray(target_scores, dtype=np.float64))
    non = np.sort(np.asarray(nontarget_scores, dtype=np.float64))
    if tgt.size == 0 or non.size == 0:
        raise EmptyScoreList("need at least one target and one nontarget score")
    nt, nn = tgt.size, non.size
    thresholds = np.unique(np.concatenate([tgt, non]))
    frr = np.append(np.searchsorted(tgt, thresholds, side="left"), nt)
    far = np.append(nn - np.searchsorted(non, thresholds, side="left"), 0)
    thresholds = np.append(thresholds, np.inf)
    # first index with FRR >= FAR, compared on integer cross-products
    k = int(np.argmax(frr.astype(np.int64) * nn >= far.astype(np.int64) * nt))
    x1, y1 = Fraction(int(frr[k]), nt), Fraction(int(far[k]), nn)
    if x1 == y1 or k == 0:
        return EerResult(float(x1), float(thresholds[k]), nt, nn)
    x0, y0 = Fraction(int(frr[k - 1]), nt), Fraction(int(far[k - 1]), nn)
    alpha = (y0 - x0) / ((y0 - x0) - (y1 - x1))
    eer = x0 + alpha * (x1 - x0)
    t0, t1 = thresholds[k - 1], thresholds[k]
    thr = t0 if np.isinf(t1) else t0 + float(alpha) * (t1 - t0)
    return EerResult(float(eer), float(thr), nt, nn)


# -- trial files -----------------------------------------------------------------


def parse_trials(text: str, base_dir=None) -> list[Trial]:
    trials = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = [f.strip() for f in line.split("\t")]
        if len(fields) != 3:
            raise ParseError("expected claimed_speaker<TAB>test_path<TAB>label", lineno)
        spk, path, label = fields
        if label not in LABELS:
            raise ParseError(f"label must be target or nontarget, got {label!r}", lineno)
        if base_dir is not None and not Path(path).is_absolute():
            path = str(Path(base_dir) / path)
        trials.append(Trial(spk, path, label))
    return trials


def read_trials(path) -> list[Trial]:
    path = Path(path)
    return parse_trials(path.read_text(encoding="utf-8"), base_dir=path.parent)


def make_trials(manifest: Manifest) -> list[Trial]:
    """Every eval utterance against every enrolled speaker."""
    enrolled = manifest.speakers("enroll")
    return [
        Trial(spk, e.path, "target" if spk == e.speaker else "nontarget")
        for e in manifest.split("eval")
        for spk in enrolled
    ]


def format_trials(trials, relative_to=None) -> str:
    lines = []
    for t in trials:
        p = t.test_path
        if relative_to is not None:
            try:
                p = str(Path(p).relative_to(relative_to))
            except ValueError:
                pass
        lines.append(f"{t.claimed_speaker}\t{p}\t{t.label}")
    return "\n".join(lines) + "\n"


# -- protocol --------------------------------------------------------------------


@dataclass(frozen=True)
class ScoreRow:
    claimed_speaker: str
    test_path: str
    score: float
    label: str


@dataclass
class ProtocolResult:
    result: EerResult
    rows: list[ScoreRow]
    skipped: list[tuple[str, str]]


def format_scores(rows) -> str:
    lines = ["claimed_speaker,test_path,score,label"]
    lines += [f"{r.claimed_speaker},{r.test_path},{r.score!r},{r.label}" for r in rows]
    return "\n".join(lines) + "\n"


def enrollment_windows(manifest: Manifest, features: Mapping[str, np.ndarray],
                       num_frames: int, segments_per_utt: int):
    """``speaker -> list of windows`` from the enroll split; short utterances are skipped."""
    out: dict[str, list[np.ndarray]] = {}
    for spk, paths in manifest.by_speaker("enroll").items():
        wins = []
        for p in paths:
            if p not in features:
                continue
            try:
                wins.extend(segments(features[p], num_frames, segments_per_utt))
            except UtteranceTooShort:
                continue
        out[spk] = wins
    return out


def run_trials(trials, features, num_frames, segments_per_utt,
               score_fn: Callable[[str, list[np.ndarray]], np.ndarray],
               known: set[str]) -> ProtocolResult:
    """Score each trial's test windows with ``score_fn(speaker, windows)``."""
    rows, skipped = [], []
    for t in trials:
        if t.claimed_speaker not in known:
            raise MissingEnrollment(f"no enrollment for claimed speaker {t.claimed_speaker}")
        raw = features.get(t.test_path)
        if raw is None:
            skipped.append((t.test_path, "unavailable"))
            continue
        try:
            wins = segments(raw, num_frames, segments_per_utt)
        except UtteranceTooShort:
            skipped.append((t.test_path, "UtteranceTooShort"))
            continue
        scores = score_fn(t.claimed_speaker, wins)
        for k, s in enumerate(scores):
            name = t.test_path if len(wins) == 1 and segments_per_utt == 1 else f"{t.test_path}#{k}"
            rows.append(ScoreRow(t.claimed_speaker, name, float(s), t.label))
    tgt = [r.score for r in rows if r.label == "target"]
    non = [r.score for r in rows if r.label == "nontarget"]
    return ProtocolResult(compute_eer(tgt, non), rows, skipped)


def evaluate_protocol(model: LstmModel, manifest: Manifest, trials, features,
                      duration_s: float = 1.0, frames_per_second: float = 100.0,
                      segments_per_utt: int = 1, normalize_dvector: bool = False) -> ProtocolResult:
    """Enroll every speaker of the enroll split, then score the trial list.

    ``features`` maps utterance paths to un-normalized feature matrices.
    Every enrollment and test window spans ``duration_s`` seconds; up to
    ``segments_per_utt`` consecutive windows are taken from each utterance
    and each test window is scored separately.
    """
    num_frames = int(round(duration_s * frames_per_second))
    speakers = {}
    for spk, wins in enrollment_windows(manifest, features, num_frames, segments_per_utt).items():
        if wins:
            speakers[spk] = enroll(model, wins, spk, normalize_dvector)

    def score_fn(spk, wins):
        return score_embeddings(speakers[spk], embed(model, wins))

    return run_trials(trials, features, num_frames, segments_per_utt, score_fn, set(speakers))


def duration_sweep(evaluate_at: Callable[[float], EerResult], durations) -> list[tuple[float, float]]:
    """EER per duration; ``evaluate_at`` trains and evaluates at one duration."""
    return [(float(d), evaluate_at(float(d)).eer) for d in durations]


def format_sweep(rows) -> str:
    return "duration_s,eer\n" + "".join(f"{d!r},{e!r}\n" for d, e in rows)


def save_speakers(path, speakers: Mapping[str, SpeakerModel]) -> None:
    payload = {
        spk: {"dvector": m.dvector.tolist(), "num_enroll_utterances": m.num_enroll_utterances,
              "normalized": m.normalized}
        for spk, m in speakers.items()
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def load_speakers(path) -> dict[str, SpeakerModel]:
    payload = json.loads(Path(path).read_text())
    return {
        spk: SpeakerModel(spk, np.array(d["dvector"]), d["num_enroll_utterances"], d["normalized"])
        for spk, d in payload.items()
    }
