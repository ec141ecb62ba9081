import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from eer_oracle import brute_force_eer
from lstm_sv.audio_io import parse_manifest
from lstm_sv.errors import EmptyScoreList, MissingEnrollment, NoEnrollmentData, ParseError
from lstm_sv.evaluation import (
    Trial,
    compute_eer,
    enroll,
    evaluate_protocol,
    format_scores,
    load_speakers,
    make_trials,
    parse_trials,
    save_speakers,
    score,
)
from lstm_sv.network import LstmConfig, LstmModel, forward, pair_distance


@pytest.fixture
def model():
    return LstmModel.init(LstmConfig(3, 4, 2), np.random.default_rng(7))


def windows(rng, n, frames=6):
    return list(rng.normal(size=(n, frames, 3)))


# -- enrollment and scoring -------------------------------------------------------------


def test_single_utterance_enrollment(model, rng):
    (x,) = windows(rng, 1)
    spk = enroll(model, [x], "A")
    np.testing.assert_array_equal(spk.dvector, forward(model, x)[0])
    assert spk.num_enroll_utterances == 1


def test_duplicate_utterances_same_as_one(model, rng):
    (x,) = windows(rng, 1)
    np.testing.assert_allclose(enroll(model, [x, x], "A").dvector, enroll(model, [x], "A").dvector,
                               atol=1e-15)


def test_dvector_is_mean(model, rng):
    a, b = windows(rng, 2)
    e1, e2 = forward(model, a)[0], forward(model, b)[0]
    np.testing.assert_allclose(enroll(model, [a, b], "A").dvector, (e1 + e2) / 2, atol=1e-12)


def test_enroll_permutation_invariant(model, rng):
    ws = windows(rng, 5)
    a = enroll(model, ws, "A").dvector
    b = enroll(model, ws[::-1], "A").dvector
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_enroll_needs_data(model):
    with pytest.raises(NoEnrollmentData):
        enroll(model, [], "A")


def test_score_properties(model, rng):
    a, b = windows(rng, 2)
    spk = enroll(model, [a], "A")
    assert score(model, spk, a) == 0.0
    s = score(model, spk, b)
    assert s <= 0.0
    assert s == pytest.approx(-pair_distance(model, a, b), abs=1e-12)


def test_normalized_dvector(model, rng):
    ws = windows(rng, 3)
    spk = enroll(model, ws, "A", normalize=True)
    units = [forward(model, w)[0] / np.linalg.norm(forward(model, w)[0]) for w in ws]
    np.testing.assert_allclose(spk.dvector, np.mean(units, axis=0), atol=1e-12)
    assert score(model, spk, ws[0]) <= 0.0


def test_speaker_file_round_trip(tmp_path, model, rng):
    spk = enroll(model, windows(rng, 2), "A")
    save_speakers(tmp_path / "s.json", {"A": spk})
    back = load_speakers(tmp_path / "s.json")["A"]
    np.testing.assert_array_equal(back.dvector, spk.dvector)
    assert back.num_enroll_utterances == 2


# -- EER -------------------------------------------------------------------------------


def test_separated_scores():
    r = compute_eer([1, 2, 3], [-3, -2, -1])
    assert r.eer == 0.0 and r.num_target == 3 and r.num_nontarget == 3


def test_identical_multisets_exactly_half():
    r = compute_eer([0.1, 0.2, 0.7, 0.7], [0.7, 0.1, 0.2, 0.7])
    assert r.eer == 0.5


def test_one_target_one_nontarget():
    assert compute_eer([0.9], [0.1]).eer == 0.0


def test_fully_inverted_scores():
    assert compute_eer([-1.0, -2.0], [1.0, 2.0]).eer == 1.0


def test_empty_lists():
    with pytest.raises(EmptyScoreList):
        compute_eer([], [1.0])
    with pytest.raises(EmptyScoreList):
        compute_eer([1.0], [])


def test_gaussian_scores():
    g = np.random.default_rng(2024)
    tgt, non = g.normal(1, 1, 1000), g.normal(-1, 1, 1000)
    eer = compute_eer(tgt, non).eer
    assert eer == pytest.approx(brute_force_eer(list(tgt), list(non)), abs=1e-12)
    assert abs(eer - norm.cdf(-1)) <= 0.03


score_lists = st.lists(st.integers(-20, 20).map(lambda v: v / 4), min_size=1, max_size=40)


@settings(max_examples=300, deadline=None)
@given(score_lists, score_lists)
def test_matches_brute_force_with_ties(tgt, non):
    assert compute_eer(tgt, non).eer == pytest.approx(brute_force_eer(tgt, non), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-4000, 4000), min_size=1, max_size=60, unique=True), st.integers(1, 59))
def test_monotone_transform_and_role_swap(values, cut):
    cut = min(cut, len(values) - 1)
    if cut == 0:
        return
    g = np.random.default_rng(len(values))
    vals = g.permutation(values) / 8.0
    tgt, non = list(vals[:cut]), list(vals[cut:])
    base = compute_eer(tgt, non).eer
    squash = lambda v: v**3 + 2.0 * v
    assert compute_eer([squash(v) for v in tgt], [squash(v) for v in non]).eer == pytest.approx(base, abs=1e-12)
    swapped = compute_eer([-v for v in non], [-v for v in tgt]).eer
    assert swapped == pytest.approx(base, abs=1e-12)


def test_threshold_lies_between_classes():
    r = compute_eer([0.8, 0.9, 0.35], [0.1, 0.2, 0.4])
    assert r.eer == pytest.approx(brute_force_eer([0.8, 0.9, 0.35], [0.1, 0.2, 0.4]))
    assert 0.2 <= r.threshold <= 0.9


# -- trial files and protocol ---------------------------------------------------------------


def test_parse_trials(tmp_path):
    trials = parse_trials("A\tx.wav\ttarget\n# c\nB\ty.wav\tnontarget\n", base_dir=tmp_path)
    assert trials == [Trial("A", str(tmp_path / "x.wav"), "target"),
                      Trial("B", str(tmp_path / "y.wav"), "nontarget")]
    with pytest.raises(ParseError):
        parse_trials("A\tx.wav\tmaybe\n")


def test_make_trials_cross_product():
    m = parse_manifest("a\tA\tenroll\nb\tB\tenroll\nc\tA\teval\nd\tB\teval\n")
    trials = make_trials(m)
    assert len(trials) == 4
    assert sum(t.is_target for t in trials) == 2


def _protocol_fixture(rng):
    # speaker A's features are offset upward, B's downward: trivially separable
    feats = {}
    lines = []
    for spk, sign in (("A", 1.0), ("B", -1.0)):
        for k in range(3):
            path = f"{spk}{k}"
            raw = rng.normal(size=(20, 3))
            raw[:, 0] += sign * np.linspace(-3, 3, 20)
            feats[path] = raw
            lines.append(f"{path}\t{spk}\t{'enroll' if k < 2 else 'eval'}")
    return parse_manifest("\n".join(lines) + "\n"), feats


def test_protocol_one_target_one_nontarget(model, rng):
    m, feats = _protocol_fixture(rng)
    trials = [Trial("A", "A2", "target"), Trial("B", "A2", "nontarget")]
    out = evaluate_protocol(model, m, trials, feats, duration_s=0.1, frames_per_second=100)
    assert len(out.rows) == 2
    tgt = [r.score for r in out.rows if r.label == "target"]
    non = [r.score for r in out.rows if r.label == "nontarget"]
    assert out.result.eer == (0.0 if tgt[0] >= non[0] else 1.0)
    assert format_scores(out.rows).splitlines()[0] == "claimed_speaker,test_path,score,label"


def test_protocol_skips_short_and_requires_enrollment(model, rng):
    m, feats = _protocol_fixture(rng)
    feats["B2"] = feats["B2"][:5]
    trials = [Trial("A", "A2", "target"), Trial("B", "A2", "nontarget"), Trial("B", "B2", "target")]
    out = evaluate_protocol(model, m, trials, feats, duration_s=0.1, frames_per_second=100)
    assert out.skipped == [("B2", "UtteranceTooShort")]
    with pytest.raises(MissingEnrollment):
        evaluate_protocol(model, m, [Trial("C", "A2", "nontarget")], feats, 0.1, 100)


def test_protocol_segments(model, rng):
    m, feats = _protocol_fixture(rng)
    trials = [Trial("A", "A2", "target"), Trial("A", "B2", "nontarget")]
    out = evaluate_protocol(model, m, trials, feats, duration_s=0.05, frames_per_second=100,
                            segments_per_utt=3)
    assert [r.test_path for r in out.rows] == ["A2#0", "A2#1", "A2#2", "B2#0", "B2#1", "B2#2"]
