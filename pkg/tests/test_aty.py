import numpy as np
import pytest
import torch

from atytts.aty import (AuxiliaryBatch, FinetunePlan, acm_forward, aty_losses, aty_train_step, build_finetune_plan,
                        finetune_aty, loss_atypical, loss_speaker, scm_forward, weighted_total)
from atytts.errors import InvalidInput, NumericalError
from atytts.tts import decode, loss_decoder, make_optimizer, parameter_digest, train_step
from atytts.vc import PairedTriple, SpeakerEmbedding
from helpers import random_durations, toy_batch, toy_tts, toy_vc

SIZES = ((3, 7), (4, 9))


def triples(rng, n=3, T=(10, 14, 20), F=6):
    out = []
    for k in range(n):
        t = T[k % len(T)]
        z = [rng.standard_normal((t, F)) for _ in range(3)]
        out.append(PairedTriple(*z, speaker_id="s1", source_utterance_id=f"src{k}", triple_id=f"t{k}"))
    return out


# -- losses ---------------------------------------------------------------------


def test_loss_worked_examples():
    a = np.full((3, 4), 5.0)
    assert loss_speaker(a, a) == 0.0
    assert loss_speaker(a, a - 2) == 4.0
    assert loss_atypical(a + 2, a) == 4.0


def test_aux_losses_match_independent_mse_and_are_symmetric():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    ref = sum((a[i, j] - b[i, j]) ** 2 for i in range(4) for j in range(6)) / 24
    for fn in (loss_speaker, loss_atypical):
        assert abs(fn(a, b) - ref) < 1e-12
        assert fn(a, b) == fn(b, a)
        assert fn(a, b) == loss_decoder(a, b)
    with pytest.raises(InvalidInput):
        loss_speaker(a, b[:3])


# -- decoder paths ----------------------------------------------------------------


def test_scm_acm_preserve_shape_and_use_the_synthesis_decoder():
    m = toy_tts()
    z = np.random.default_rng(1).standard_normal((15, 6))
    out = scm_forward(z, m, "s1")
    assert out.shape == z.shape and acm_forward(z, m, "s1").shape == z.shape
    np.testing.assert_allclose(out, decode(z, m, "s1").frames, atol=1e-6)
    with pytest.raises(InvalidInput):
        scm_forward(np.zeros((5, 7)), m, "s1")
    m.hp.max_frames = 10
    with pytest.raises(InvalidInput):
        acm_forward(z, m, "s1")


@pytest.mark.parametrize("key", ["speaker", "atypical"])
def test_aux_gradient_reaches_shared_decoder_only(key):
    rng = np.random.default_rng(2)
    m = toy_tts()
    losses = aty_losses(m, toy_batch(m, rng, SIZES), AuxiliaryBatch(triples(rng), 8), "s1", rng, rng)
    losses[key].backward()
    dec = [p.grad for p in m.decoder.parameters()]
    assert all(g is not None for g in dec) and sum(g.norm() for g in dec) > 0
    assert all(p.grad is None for p in m.encoder.parameters())


def test_updating_decoder_changes_every_path():
    m = toy_tts()
    z = np.random.default_rng(3).standard_normal((12, 6))
    before = [scm_forward(z, m, "s0"), acm_forward(z, m, "s0"), decode(z, m, "s0").frames]
    with torch.no_grad():
        next(m.decoder.out.parameters()).add_(0.1)
    after = [scm_forward(z, m, "s0"), acm_forward(z, m, "s0"), decode(z, m, "s0").frames]
    assert all(not np.allclose(a, b) for a, b in zip(before, after))
    np.testing.assert_array_equal(after[0], after[1])


# -- training step ---------------------------------------------------------------


def test_breakdown_total_is_sum_and_nonnegative():
    rng = np.random.default_rng(4)
    m = toy_tts()
    row = aty_train_step(toy_batch(m, rng, SIZES), AuxiliaryBatch(triples(rng), 8), m, make_optimizer(m),
                         "s1", rng, np.random.default_rng(5))
    parts = [row[k] for k in ("encoder", "duration", "decoder", "speaker", "atypical")]
    assert all(p >= 0 for p in parts)
    assert abs(row["total"] - sum(parts)) < 1e-10


def test_zero_lambda_reduces_to_plain_train_step():
    rng = np.random.default_rng(6)
    a, b = toy_tts(), toy_tts()
    batch = toy_batch(a, rng, SIZES)
    aux = AuxiliaryBatch(triples(rng), 8)
    opt_a, opt_b = make_optimizer(a, 1e-3), make_optimizer(b, 1e-3)
    aty_train_step(batch, aux, a, opt_a, "s1", np.random.default_rng(0), np.random.default_rng(1), 0.0, 0.0)
    train_step(batch, b, opt_b, np.random.default_rng(0))
    for pa, pb in zip(a.parameters(), b.parameters()):
        torch.testing.assert_close(pa.grad, pb.grad, atol=1e-10, rtol=0)
        torch.testing.assert_close(pa, pb, atol=1e-10, rtol=0)


def test_total_gradient_is_sum_of_component_gradients():
    rng = np.random.default_rng(7)
    m = toy_tts()
    batch = toy_batch(m, rng, SIZES)
    aux = AuxiliaryBatch(triples(rng), 8)
    durations = random_durations(rng, SIZES)
    offsets, _ = aux.crops(np.random.default_rng(0))
    params = list(m.parameters())

    def losses():
        return aty_losses(m, batch, aux, "s1", np.random.default_rng(0), None, durations, offsets)

    total = torch.autograd.grad(weighted_total(losses()), params, allow_unused=True)
    summed = [torch.zeros_like(p) for p in params]
    for key in ("encoder", "duration", "decoder", "speaker", "atypical"):
        for acc, g in zip(summed, torch.autograd.grad(losses()[key], params, allow_unused=True)):
            if g is not None:
                acc += g
    for g, s in zip(total, summed):
        torch.testing.assert_close(torch.zeros_like(s) if g is None else g, s, atol=1e-8, rtol=0)


def test_all_targets_matched_gives_zero_aux_losses():
    m = toy_tts()
    rng = np.random.default_rng(8)
    z_in = rng.standard_normal((10, 6))
    z_out = scm_forward(z_in, m, "s1")
    aux = AuxiliaryBatch([PairedTriple(z_in, z_in, z_out, "s1", "u")], 10)
    losses = aty_losses(m, toy_batch(m, rng, SIZES), aux, "s1", rng, rng)
    assert losses["speaker"].item() < 1e-20 and losses["atypical"].item() < 1e-20


def test_non_finite_aux_loss_aborts_with_component_name():
    rng = np.random.default_rng(9)
    m = toy_tts()
    bad = triples(rng)
    bad[0].z_a[:] = np.inf
    with pytest.raises(NumericalError, match="speaker"):
        aty_train_step(toy_batch(m, rng, SIZES), AuxiliaryBatch(bad, 8), m, make_optimizer(m), "s1", rng, rng)


def test_finetune_keeps_vocab_and_features():
    rng = np.random.default_rng(10)
    m = toy_tts(dtype=torch.float32)
    vocab, cfg = m.vocab, m.feature_config
    plan = FinetunePlan("s1", triples(rng), 8, seed=0)
    finetune_aty(m, toy_batch(m, rng, SIZES), "s1", plan, epochs=2, batch_size=2, lr=1e-3)
    assert m.vocab is vocab and m.feature_config == cfg
    with pytest.raises(InvalidInput):
        finetune_aty(m, [], "s1")


def test_finetune_without_aux_ignores_plan():
    rng = np.random.default_rng(11)
    base = toy_tts(dtype=torch.float32)
    batch = toy_batch(base, rng, SIZES)
    plan = FinetunePlan("s1", triples(rng), 8, seed=0)
    a, b = toy_tts(dtype=torch.float32), toy_tts(dtype=torch.float32)
    finetune_aty(a, batch, "s1", plan, epochs=3, batch_size=2, lambda_speaker=0, lambda_atypical=0)
    finetune_aty(b, batch, "s1", None, epochs=3, batch_size=2)
    assert parameter_digest(a) == parameter_digest(b)


# -- auxiliary plan --------------------------------------------------------------


def test_crops_are_frame_synchronised():
    rng = np.random.default_rng(12)
    ts = triples(rng, n=6)
    batch = AuxiliaryBatch(ts, 8)
    offsets, sizes = batch.crops(np.random.default_rng(0))
    z_s, z_t, z_a, mask = batch.tensors(torch.float64, offsets=offsets)
    for k, (t, o, s) in enumerate(zip(ts, offsets, sizes)):
        assert s == min(8, t.n_frames) and 0 <= o <= t.n_frames - s
        for got, key in ((z_s, "z_s"), (z_t, "z_t"), (z_a, "z_a")):
            np.testing.assert_array_equal(got[k, :, :s].numpy(), getattr(t, key)[o:o + s].T)
    assert mask.shape == (6, 1, 8)


def test_plan_stream_reproducible_and_cycles():
    rng = np.random.default_rng(13)
    plan = FinetunePlan("s1", triples(rng, n=5), 8, seed=3)
    ids = lambda: [[t.triple_id for t in b.triples] for b in plan.stream(2, n_batches=7)]
    first = ids()
    assert first == ids() and len(first) == 7
    assert sorted(sum(first[:3], [])) == [f"t{k}" for k in range(5)]
    assert list(FinetunePlan("s1", [], 8).stream(2, 3)) == []


def test_build_plan_zero_hours_is_empty():
    e = SpeakerEmbedding(np.ones(5), "s1")
    plan = build_finetune_plan("s1", toy_vc(), iter([]), 0, e, 11.6)
    assert plan.triples == [] and list(plan.stream(4)) == []


def test_aux_batch_rejects_mixed_feature_sizes():
    rng = np.random.default_rng(14)
    mixed = triples(rng, n=1) + triples(rng, n=1, F=5)
    with pytest.raises(InvalidInput):
        AuxiliaryBatch(mixed)
