import hashlib

import numpy as np
import pytest

from atytts.corpus import (AVERAGE_PROFILE, ENTITY_VALUES, INTENT_TEMPLATES, SPEAKER_DIM, AtypicalTransform,
                           CorpusSpec, SyntheticSpeakerProfile, atypical_severities, build_lexicon, generate_corpus,
                           make_profile, render_utterance, sample_sentence, timbre_embedding)
from atytts.errors import InvalidInput
from atytts.manifest import read_manifest
from atytts.slu import assign_group

LEX = build_lexicon(0)
TEXT = "hey jay turn on the lights in the kitchen"


def test_identity_transform_iff_severity_zero():
    assert AtypicalTransform.from_severity(0.0).is_identity
    assert not AtypicalTransform.from_severity(0.1).is_identity
    with pytest.raises(InvalidInput):
        SyntheticSpeakerProfile("x", 1.0, 120.0, severity=0.0, transform=AtypicalTransform(time_stretch=1.5))
    with pytest.raises(InvalidInput):
        SyntheticSpeakerProfile("x", 1.0, 120.0, severity=1.0)


def test_transform_parameters_monotone_in_severity():
    grid = [AtypicalTransform.from_severity(s) for s in np.linspace(0, 4, 17)]
    assert all(a.time_stretch <= b.time_stretch for a, b in zip(grid, grid[1:]))
    assert all(a.pause_scale <= b.pause_scale for a, b in zip(grid, grid[1:]))
    assert all(a.jitter_depth <= b.jitter_depth for a, b in zip(grid, grid[1:]))
    assert all(a.spectral_tilt >= b.spectral_tilt for a, b in zip(grid, grid[1:]))
    with pytest.raises(InvalidInput):
        AtypicalTransform.from_severity(4.5)


def test_profiles_deterministic_from_id_and_seed():
    assert make_profile("typ03", 5) == make_profile("typ03", 5)
    assert make_profile("typ03", 5) != make_profile("typ03", 6)
    assert make_profile("typ03", 5) != make_profile("typ04", 5)


def test_severity_zero_rendering_equals_typical_twin():
    aty = make_profile("spk", 0, severity=0.0)
    a = render_utterance(TEXT, aty, LEX, seed=3)
    b = render_utterance(TEXT, aty.typical_twin(), LEX, seed=3)
    np.testing.assert_array_equal(a.waveform.samples, b.waveform.samples)
    np.testing.assert_array_equal(a.mel.frames, b.mel.frames)


def test_time_stretch_two_doubles_frames():
    base = make_profile("spk", 0)
    slow = SyntheticSpeakerProfile("spk", base.formant_scale, base.pitch, base.rate, base.tilt, severity=1.0,
                                   transform=AtypicalTransform(time_stretch=2.0))
    a = render_utterance(TEXT, base, LEX, seed=1)
    b = render_utterance(TEXT, slow, LEX, seed=1)
    assert abs(b.mel.n_frames - 2 * a.mel.n_frames) <= 1


def test_durations_sum_to_frames_and_match_symbols():
    r = render_utterance(TEXT, make_profile("aty", 0, severity=2.5), LEX, seed=9)
    assert r.durations.sum() == r.mel.n_frames
    assert len(r.durations) == len(r.symbols) and r.durations.min() >= 1
    assert len(r.waveform.samples) == r.mel.n_frames * 256


def test_rendering_is_deterministic():
    p = make_profile("aty", 0, severity=1.2)
    a, b = render_utterance(TEXT, p, LEX, seed=4), render_utterance(TEXT, p, LEX, seed=4)
    assert a.waveform.samples.tobytes() == b.waveform.samples.tobytes()


def test_unknown_word_rejected():
    with pytest.raises(InvalidInput):
        render_utterance("hey jay fly me to the moon", make_profile("a", 0), LEX)


def test_forced_durations_give_frame_synchronous_oracle():
    src = render_utterance(TEXT, make_profile("typ", 0), LEX, seed=2)
    tgt = render_utterance(TEXT, make_profile("aty", 0, severity=3.0), LEX, seed=2, durations=src.durations)
    assert tgt.mel.n_frames == src.mel.n_frames
    np.testing.assert_array_equal(tgt.durations, src.durations)
    with pytest.raises(InvalidInput):
        render_utterance(TEXT, make_profile("aty", 0), LEX, durations=src.durations[:-1])


def _time_normalised_distance(a, b):
    idx = np.linspace(0, len(b) - 1, len(a))
    lo = np.floor(idx).astype(int)
    hi = np.minimum(lo + 1, len(b) - 1)
    w = (idx - lo)[:, None]
    bi = (1 - w) * b[lo] + w * b[hi]
    return float(np.mean((a - bi) ** 2))


def test_severity_monotonicity():
    base = make_profile("mono", 1)
    typical = render_utterance(TEXT, base, LEX, seed=5).mel.frames
    dists = []
    for s in (0.0, 0.5, 1.0, 2.0, 3.0, 4.0):
        prof = make_profile("mono", 1, severity=s)
        dists.append(_time_normalised_distance(typical, render_utterance(TEXT, prof, LEX, seed=5).mel.frames))
    assert dists[0] == 0.0
    assert all(a <= b for a, b in zip(dists, dists[1:])), dists


def test_timbre_embedding_unit_norm_and_blind_to_transform():
    p = make_profile("aty", 0, severity=3.0)
    e = timbre_embedding(p)
    assert e.shape == (SPEAKER_DIM,)
    assert np.linalg.norm(e) == pytest.approx(1.0)
    np.testing.assert_array_equal(e, timbre_embedding(p.typical_twin()))
    assert not np.allclose(e, timbre_embedding(AVERAGE_PROFILE))


def test_sentences_contain_entity_values_verbatim():
    rng = np.random.default_rng(0)
    for _ in range(200):
        text, intent, entities = sample_sentence(rng)
        assert intent in INTENT_TEMPLATES
        for slot, value in entities:
            assert value in ENTITY_VALUES[slot]
            assert f" {value}" in text


def test_severity_schedule_alternates_groups():
    groups = [assign_group(s).group for s in atypical_severities(8, 0)]
    assert groups == ["Low", "High"] * 4


def test_generate_corpus_counts_and_byte_identical_manifests(tmp_path):
    spec = CorpusSpec(n_typical=6, n_atypical=4, utterances_per_speaker=20, seed=3)
    a = generate_corpus(spec, tmp_path / "a")
    generate_corpus(spec, tmp_path / "b")
    ma, mb = (tmp_path / "a" / "manifest.jsonl").read_bytes(), (tmp_path / "b" / "manifest.jsonl").read_bytes()
    assert hashlib.sha256(ma).digest() == hashlib.sha256(mb).digest()
    recs = read_manifest(tmp_path / "a" / "manifest.jsonl")
    assert len(recs) == 200 == len(a.records)
    for r in recs:
        assert (tmp_path / "a" / r.audio_path).exists()
        prof = a.profiles[r.speaker_id]
        assert (r.severity is not None) == prof.atypical
        for _, value in r.entities:
            assert value in r.transcript.split()
    assert (tmp_path / "a" / "lexicon.txt").exists() and (tmp_path / "a" / "vocab.txt").exists()


def test_corpus_spec_validation():
    with pytest.raises(InvalidInput):
        CorpusSpec(0, 0, 10)
    with pytest.raises(InvalidInput):
        CorpusSpec(1, 0, 0)
    with pytest.raises(InvalidInput):
        CorpusSpec(1, 2, 5, severities=(1.0,))
