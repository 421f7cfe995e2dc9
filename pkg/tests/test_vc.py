import json

import numpy as np
import pytest
import torch

from atytts.audio import MelSpectrogram, load_mel
from atytts.errors import InvalidInput
from atytts.modules import masked_mse
from atytts.tts import parameter_digest
from atytts.vc import (PairedTriple, SpeakerEmbedding, convert_atypical, convert_typical, finetune_atypical_decoder,
                       generate_paired_triples, load_vc, reconstruction_error, save_vc, vc_encode, write_triples)
from helpers import gradcheck, toy_vc

HOP = 1000 * 256 / 22050


def emb(seed=0, dim=5):
    return SpeakerEmbedding(np.random.default_rng(seed).standard_normal(dim), f"spk{seed}")


def mel(T=12, F=6, seed=0):
    return np.random.default_rng(seed).standard_normal((T, F)).astype(np.float32)


def test_speaker_embedding_normalised_and_validated():
    e = emb()
    assert np.linalg.norm(e.vector) == pytest.approx(1.0)
    for bad in (np.zeros(5), np.array([np.nan, 1.0]), np.ones((2, 2))):
        with pytest.raises(InvalidInput):
            SpeakerEmbedding(bad)


def test_encode_shape_and_determinism():
    m = toy_vc()
    h = vc_encode(mel(), m)
    assert h.shape == (12, 6)
    np.testing.assert_array_equal(h, vc_encode(mel(), m))
    with pytest.raises(InvalidInput):
        vc_encode(mel(F=7), m)


def test_conversions_preserve_frames_and_reject_bad_embedding():
    m = toy_vc()
    for T in (1, 5, 40):
        z = MelSpectrogram(mel(T), HOP)
        for conv in (convert_typical, convert_atypical):
            out = conv(z, emb(), m)
            assert out.frames.shape == (T, 6)
    with pytest.raises(InvalidInput):
        convert_typical(mel(), emb(dim=4), m)


def test_copied_decoder_gives_identical_outputs():
    m = toy_vc()
    z = mel(seed=3)
    np.testing.assert_array_equal(convert_typical(z, emb(), m).frames, convert_atypical(z, emb(), m).frames)


def test_conversion_deterministic():
    m = toy_vc()
    a = convert_atypical(mel(), emb(1), m).frames
    assert a.tobytes() == convert_atypical(mel(), emb(1), m).frames.tobytes()


def test_encoder_gradient_matches_central_differences():
    m = toy_vc()
    rng = np.random.default_rng(0)
    x = torch.as_tensor(rng.standard_normal((2, 6, 10)))
    target = torch.as_tensor(rng.standard_normal((2, 6, 10)))
    mask = torch.ones(2, 1, 10, dtype=torch.float64)
    err, norm = gradcheck(lambda: masked_mse(m.encoder(x, mask), target, mask), list(m.encoder.parameters()), rng)
    assert norm > 0 and err < 1e-3


def test_finetune_only_changes_atypical_decoder():
    m = toy_vc(dtype=torch.float32)
    data = [(mel(10, seed=s), emb(s)) for s in range(4)]
    enc, dec_t, dec_a = (parameter_digest(x) for x in (m.encoder, m.dec_typical, m.dec_atypical))
    out = finetune_atypical_decoder(m, data, epochs=3, batch_size=2)
    assert parameter_digest(out.encoder) == enc and parameter_digest(out.dec_typical) == dec_t
    assert parameter_digest(out.dec_atypical) != dec_a
    assert parameter_digest(m.dec_atypical) == dec_a
    same = finetune_atypical_decoder(m, data, epochs=0)
    assert parameter_digest(same) == parameter_digest(m)
    with pytest.raises(InvalidInput):
        finetune_atypical_decoder(m, [])


def test_shared_encoder_feeds_both_decoders_identically():
    m = toy_vc()
    captured = []
    hook = m.encoder.register_forward_hook(lambda mod, inp, out: captured.append(out.detach().clone()))
    z = mel(seed=8)
    convert_typical(z, emb(), m)
    convert_atypical(z, emb(), m)
    hook.remove()
    assert torch.equal(captured[0], captured[1])


def test_finetune_descends_on_repeated_batch():
    wins = 0
    for seed in range(20):
        m = toy_vc(seed=seed, dtype=torch.float32)
        data = [(mel(10, seed=100 + seed), emb(seed))]
        before = reconstruction_error(m, data)
        after = reconstruction_error(finetune_atypical_decoder(m, data, epochs=10, batch_size=1, lr=1e-3,
                                                               seed=seed), data)
        wins += after < before
    assert wins >= 18


def _source(n, T=172, F=6):
    for k in range(n):
        yield f"src{k}", mel(T, F, seed=k)


def test_triples_hours_arithmetic_and_frame_invariant():
    m = toy_vc(dtype=torch.float32)
    ts = generate_paired_triples(_source(400), emb(), m, hours=0.1, frame_hop_ms=HOP)
    # 0.1 h = 360 s of 172-frame (1.997 s) clips
    assert abs(len(ts.triples) - 180) <= 1
    assert ts.seconds >= 360 and not ts.exhausted
    for t in ts.triples:
        assert t.z_s.shape == t.z_t.shape == t.z_a.shape
    assert generate_paired_triples(_source(5), emb(), m, hours=0, frame_hop_ms=HOP).triples == []


def test_triples_partial_result_warns():
    m = toy_vc(dtype=torch.float32)
    with pytest.warns(RuntimeWarning, match="exhausted"):
        ts = generate_paired_triples(_source(3), emb(), m, hours=1.0, frame_hop_ms=HOP)
    assert len(ts.triples) == 3 and ts.exhausted


def test_triples_reproducible_from_provenance(tmp_path):
    m = toy_vc(dtype=torch.float32)
    e = emb(2)
    ts = generate_paired_triples(_source(4, T=30), e, m, hours=2e-4, frame_hop_ms=HOP, seed=5)
    manifest = write_triples(tmp_path, ts, HOP)
    rows = [json.loads(line) for line in open(manifest)]
    assert {r["triple_id"] for r in rows} == {t.triple_id for t in ts.triples}
    for row, t in zip(rows, ts.triples):
        assert set(row) == {"triple_id", "source_id", "speaker_id", "seed", "paths"} and row["seed"] == 5
        z_s = load_mel(tmp_path / row["paths"]["z_s"]).frames
        np.testing.assert_array_equal(z_s, t.z_s)
        np.testing.assert_array_equal(load_mel(tmp_path / row["paths"]["z_a"]).frames,
                                      convert_atypical(z_s, e, m).frames)


def test_triple_rejects_mismatched_shapes():
    with pytest.raises(InvalidInput):
        PairedTriple(mel(5), mel(5), mel(6), "s", "u")


def test_checkpoint_round_trip(tmp_path):
    m = toy_vc(dtype=torch.float32)
    save_vc(tmp_path / "vc.pt", m)
    back = load_vc(tmp_path / "vc.pt")
    assert parameter_digest(back) == parameter_digest(m)
