"""Atypical fine-tuning of the TTS model with VC-derived auxiliary losses.

Besides the usual encoder / duration / decoder losses on real atypical
data, the TTS decoder is asked to map VC-generated mels to the atypical
target:

* speaker characteristics modelling (SCM): ``decoder(z_s) -> z_a``
* atypical characteristics modelling (ACM): ``decoder(z_t) -> z_a``

Both paths reuse the exact decoder parameters of the synthesis path and
condition on the target speaker's embedding.
"""
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .audio import as_frames
from .errors import InvalidInput
from .modules import masked_mse, pad_stack, sequence_mask
from .tts import check_finite, iterate_batches, make_optimizer, mse, tts_losses
from .vc import PairedTriple, generate_paired_triples

log = logging.getLogger(__name__)

LOSS_NAMES = ("encoder", "duration", "decoder", "speaker", "atypical")


def _decoder_path(z, model, speaker):
    x = np.asarray(as_frames(z))
    if x.ndim != 2 or x.shape[1] != model.hp.n_feats:
        raise InvalidInput(f"expected (T, {model.hp.n_feats}) mel, got {x.shape}")
    if x.shape[0] > model.hp.max_frames:
        raise InvalidInput(f"{x.shape[0]} frames exceeds the cap of {model.hp.max_frames}")
    t = torch.as_tensor(x, dtype=model.dtype).T[None]
    mask = torch.ones(1, 1, t.shape[-1], dtype=model.dtype)
    with torch.no_grad():
        out = model.decoder(t, model.speaker_vectors([speaker]), mask)
    return out[0].T.numpy()


def scm_forward(z_s, model, speaker):
    """Decoder applied to a source typical mel (SCM path)."""
    return _decoder_path(z_s, model, speaker)


def acm_forward(z_t, model, speaker):
    """Decoder applied to a target-timbre typical mel (ACM path)."""
    return _decoder_path(z_t, model, speaker)


def loss_speaker(z1_hat, z_a):
    return mse(z1_hat, z_a)


def loss_atypical(z2_hat, z_a):
    return mse(z2_hat, z_a)


@dataclass
class AuxiliaryBatch:
    """A set of triples from which synchronized fixed-length crops are drawn."""

    triples: list
    crop_frames: int = 172

    def __post_init__(self):
        feats = {t.z_s.shape[1] for t in self.triples}
        if len(feats) > 1:
            raise InvalidInput("triples in one batch must share F")
        if self.crop_frames <= 0:
            raise InvalidInput("crop_frames must be positive")

    def __len__(self):
        return len(self.triples)

    def crops(self, rng):
        """Return ``(offsets, sizes)`` with one shared frame range per triple."""
        offsets, sizes = [], []
        for t in self.triples:
            size = min(self.crop_frames, t.n_frames)
            offsets.append(int(rng.integers(0, t.n_frames - size + 1)))
            sizes.append(size)
        return offsets, sizes

    def tensors(self, dtype, rng=None, offsets=None):
        """Stack cropped (z_s, z_t, z_a) into (B, F, crop) tensors plus a mask."""
        if offsets is None:
            offsets, sizes = self.crops(rng)
        else:
            sizes = [min(self.crop_frames, t.n_frames) for t in self.triples]
        out = []
        for key in ("z_s", "z_t", "z_a"):
            arrs = [getattr(t, key)[o:o + s].T for t, o, s in zip(self.triples, offsets, sizes)]
            out.append(pad_stack(arrs, dtype)[0])
        mask = sequence_mask(torch.tensor(sizes), max(sizes)).to(dtype)
        return (*out, mask)


def aty_losses(model, tts_batch, aux_batch, speaker, rng, aux_rng, durations=None, aux_offsets=None):
    """All five loss terms as scalar tensors.

    The real-data terms are computed by :func:`tts_losses` with ``rng``;
    the auxiliary crops use a separate ``aux_rng`` so that dropping the
    auxiliary terms leaves the real-data path untouched.
    """
    losses = tts_losses(model, tts_batch, rng, durations)
    zero = torch.zeros((), dtype=model.dtype)
    if aux_batch is None or len(aux_batch) == 0:
        losses["speaker"] = zero
        losses["atypical"] = zero
        return losses
    z_s, z_t, z_a, mask = aux_batch.tensors(model.dtype, aux_rng, aux_offsets)
    spk = model.speaker_vectors([speaker] * z_s.shape[0])
    losses["speaker"] = masked_mse(model.decoder(z_s, spk, mask), z_a, mask)
    losses["atypical"] = masked_mse(model.decoder(z_t, spk, mask), z_a, mask)
    return losses


def weighted_total(losses, lambda_speaker=1.0, lambda_atypical=1.0):
    return (losses["encoder"] + losses["duration"] + losses["decoder"]
            + lambda_speaker * losses["speaker"] + lambda_atypical * losses["atypical"])


def aty_train_step(tts_batch, aux_batch, model, optimizer, speaker, rng, aux_rng,
                   lambda_speaker=1.0, lambda_atypical=1.0):
    """One optimisation step on the five-term objective.

    Returns a dict with each component and ``total``; the total is the
    weighted sum that was back-propagated (unit weights by default).
    """
    if not tts_batch:
        raise InvalidInput("empty real-data batch")
    model.train()
    losses = aty_losses(model, tts_batch, aux_batch, speaker, rng, aux_rng)
    terms = {k: losses[k] for k in LOSS_NAMES}
    check_finite(terms, tts_batch)
    total = weighted_total(terms, lambda_speaker, lambda_atypical)
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    out = {k: v.item() for k, v in terms.items()}
    out["total"] = total.item()
    return out


# --------------------------------------------------------------------------
# auxiliary data plan
# --------------------------------------------------------------------------


@dataclass
class FinetunePlan:
    speaker_id: str
    triples: list
    crop_frames: int = 172
    seed: int = 0
    manifest: list = field(default_factory=list)

    def stream(self, batch_size, n_batches=None):
        """Deterministic shuffled stream of :class:`AuxiliaryBatch` objects.

        Cycles through the triples in a new permutation each pass.
        """
        if not self.triples:
            return
        rng = np.random.default_rng(self.seed)
        emitted = 0
        while n_batches is None or emitted < n_batches:
            order = rng.permutation(len(self.triples))
            for start in range(0, len(order), batch_size):
                if n_batches is not None and emitted >= n_batches:
                    return
                yield AuxiliaryBatch([self.triples[i] for i in order[start:start + batch_size]], self.crop_frames)
                emitted += 1

    def write_manifest(self, path):
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for row in self.manifest:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def build_finetune_plan(speaker_id, vc_model, source, hours, embedding, frame_hop_ms,
                        crop_frames=172, seed=0):
    """Generate triples for one atypical speaker and wrap them in a plan."""
    if hours == 0:
        return FinetunePlan(speaker_id, [], crop_frames, seed)
    ts = generate_paired_triples(source, embedding, vc_model, hours, frame_hop_ms, seed)
    return FinetunePlan(speaker_id, ts.triples, crop_frames, seed, ts.provenance)


def finetune_aty(model, examples, speaker, plan=None, epochs=50, batch_size=16, lr=2e-4, seed=0,
                 lambda_speaker=1.0, lambda_atypical=1.0, log_rows=None):
    """Fine-tune all TTS parameters on one atypical speaker.

    Each step pairs a real-data sub-batch with an auxiliary sub-batch of
    the same size.  Real-data order and crops depend only on ``seed``, so
    runs with and without the auxiliary losses see identical real data.
    """
    if not examples:
        raise InvalidInput("no real atypical data")
    rng = np.random.default_rng(seed)
    aux_rng = np.random.default_rng([seed, 1])
    torch.manual_seed(seed)
    opt = make_optimizer(model, lr)
    steps_per_epoch = -(-len(examples) // batch_size)
    use_aux = plan is not None and plan.triples and (lambda_speaker or lambda_atypical)
    aux_stream = plan.stream(batch_size) if use_aux else None
    step = 0
    for _ in range(epochs):
        for batch in iterate_batches(examples, batch_size, rng):
            aux = None
            if aux_stream is not None:
                aux = next(aux_stream)
                aux = AuxiliaryBatch(aux.triples[:len(batch)], aux.crop_frames)
            row = aty_train_step(batch, aux, model, opt, speaker, rng, aux_rng, lambda_speaker, lambda_atypical)
            step += 1
            if log_rows is not None:
                log_rows.append({"step": step, **row})
    model.eval()
    log.debug("finetune done steps=%d steps_per_epoch=%d", step, steps_per_epoch)
    return model


__all__ = [
    "AuxiliaryBatch", "FinetunePlan", "LOSS_NAMES", "PairedTriple", "acm_forward", "aty_losses",
    "aty_train_step", "build_finetune_plan", "finetune_aty", "loss_atypical", "loss_speaker",
    "scm_forward", "weighted_total",
]
