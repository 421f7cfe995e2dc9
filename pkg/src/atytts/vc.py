"""Voice conversion with a shared encoder and two decoders.

The encoder maps any typical mel to a speaker-independent "average voice"
mel (frame-synchronous).  The typical decoder re-synthesises a target
timbre from that representation and a speaker embedding; the atypical
decoder starts as a copy of it and is fine-tuned on one atypical
speaker.  Conversion never changes the frame count.
"""
import copy
import json
import logging
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .audio import MelSpectrogram, as_frames, save_mel
from .errors import InvalidInput
from .modules import MelDecoder, MelEncoder, masked_mse, pad_stack, sequence_mask

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "atytts-vc"
CHECKPOINT_VERSION = 1


@dataclass
class VcHParams:
    n_feats: int = 80
    spk_dim: int = 17
    enc_hidden: int = 96
    enc_layers: int = 3
    enc_kernel: int = 3
    dec_hidden: int = 96
    dec_layers: int = 3
    dec_kernel: int = 3


@dataclass
class SpeakerEmbedding:
    vector: np.ndarray
    speaker_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        n = np.linalg.norm(v)
        if v.ndim != 1 or not np.isfinite(n) or n == 0:
            raise InvalidInput("speaker embedding must be a finite non-zero vector")
        self.vector = v / n


class VcModel(nn.Module):
    def __init__(self, hp):
        super().__init__()
        self.hp = hp
        self.encoder = MelEncoder(hp.n_feats, hp.enc_hidden, hp.enc_layers, hp.enc_kernel)
        self.dec_typical = MelDecoder(hp.n_feats, hp.spk_dim, hp.dec_hidden, hp.dec_layers, hp.dec_kernel)
        self.dec_atypical = MelDecoder(hp.n_feats, hp.spk_dim, hp.dec_hidden, hp.dec_layers, hp.dec_kernel)
        self.reset_atypical_decoder()

    @classmethod
    def create(cls, seed=0, **overrides):
        torch.manual_seed(seed)
        return cls(VcHParams(**overrides))

    @property
    def dtype(self):
        return self.encoder.out.weight.dtype

    def reset_atypical_decoder(self):
        """Copy the typical decoder's parameters into the atypical one."""
        self.dec_atypical.load_state_dict(self.dec_typical.state_dict())


def _check_mel(z, model):
    x = np.asarray(as_frames(z))
    if x.ndim != 2 or x.shape[1] != model.hp.n_feats:
        raise InvalidInput(f"expected (T, {model.hp.n_feats}) mel, got {x.shape}")
    return torch.as_tensor(x, dtype=model.dtype).T[None]


def _check_embedding(e, model):
    vec = e.vector if isinstance(e, SpeakerEmbedding) else SpeakerEmbedding(e).vector
    if vec.shape != (model.hp.spk_dim,):
        raise InvalidInput(f"speaker embedding must have dimension {model.hp.spk_dim}, got {vec.shape}")
    return torch.as_tensor(vec, dtype=model.dtype)[None]


@torch.no_grad()
def vc_encode(z_s, model):
    """Hidden representation (T', H) of a source mel."""
    x = _check_mel(z_s, model)
    mask = torch.ones(1, 1, x.shape[-1], dtype=model.dtype)
    return model.encoder(x, mask)[0].T.numpy()


@torch.no_grad()
def _convert(z_s, e, model, decoder):
    x = _check_mel(z_s, model)
    spk = _check_embedding(e, model)
    mask = torch.ones(1, 1, x.shape[-1], dtype=model.dtype)
    h = model.encoder(x, mask)
    out = decoder(h, spk, mask)[0].T.numpy()
    hop = z_s.frame_hop if isinstance(z_s, MelSpectrogram) else 0.0
    return MelSpectrogram(out, hop)


def convert_typical(z_s, e, model):
    """Typical-to-typical conversion to the timbre of ``e``."""
    return _convert(z_s, e, model, model.dec_typical)


def convert_atypical(z_s, e, model):
    """Typical-to-atypical conversion through the fine-tuned decoder."""
    return _convert(z_s, e, model, model.dec_atypical)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class VcExample:
    mel: np.ndarray  # (T, F) speaker mel
    embedding: np.ndarray  # (D,)
    average: np.ndarray = None  # (T, F) average-voice target for the encoder
    utterance_id: str = ""


def _batch_tensors(batch, dtype, with_average):
    y, lengths = pad_stack([ex.mel.T for ex in batch], dtype)
    mask = sequence_mask(lengths, y.shape[-1]).to(dtype)
    spk = torch.as_tensor(np.stack([SpeakerEmbedding(ex.embedding).vector for ex in batch]), dtype=dtype)
    avg = pad_stack([ex.average.T for ex in batch], dtype)[0] if with_average else None
    return y, mask, spk, avg


def _iterate(items, batch_size, rng):
    order = rng.permutation(len(items))
    for start in range(0, len(items), batch_size):
        yield [items[i] for i in order[start:start + batch_size]]


def train_vc(model, examples, epochs, batch_size=16, lr=1e-3, seed=0, log_rows=None):
    """Train the encoder (average-voice MSE) and the typical decoder (reconstruction MSE).

    The decoder sees a detached encoder output, so reconstruction pressure
    cannot leak speaker identity into the hidden representation.  The
    atypical decoder is re-initialised from the typical one afterwards.
    """
    if not examples:
        raise InvalidInput("no training data")
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    params = list(model.encoder.parameters()) + list(model.dec_typical.parameters())
    opt = torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)
    model.train()
    step = 0
    for _ in range(epochs):
        for batch in _iterate(examples, batch_size, rng):
            y, mask, spk, avg = _batch_tensors(batch, model.dtype, True)
            h = model.encoder(y, mask)
            l_enc = masked_mse(h, avg, mask)
            l_dec = masked_mse(model.dec_typical(h.detach(), spk, mask), y, mask)
            loss = l_enc + l_dec
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            if log_rows is not None:
                log_rows.append({"step": step, "encoder": l_enc.item(), "decoder": l_dec.item()})
    model.reset_atypical_decoder()
    model.eval()
    return model


def finetune_atypical_decoder(model, speaker_data, epochs=30, batch_size=8, lr=5e-4, seed=0, log_rows=None):
    """Return a copy of ``model`` whose atypical decoder is fitted to one speaker.

    ``speaker_data`` is a list of ``(mel, embedding)`` pairs.  Only the
    atypical decoder changes; the encoder and typical decoder are bitwise
    untouched.  ``epochs=0`` returns an unchanged copy.
    """
    if not speaker_data:
        raise InvalidInput("speaker_data is empty")
    out = copy.deepcopy(model)
    if epochs == 0:
        return out
    examples = [VcExample(np.asarray(as_frames(m)), np.asarray(getattr(e, "vector", e))) for m, e in speaker_data]
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    for p in out.encoder.parameters():
        p.requires_grad_(False)
    for p in out.dec_typical.parameters():
        p.requires_grad_(False)
    opt = torch.optim.Adam(out.dec_atypical.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)
    out.train()
    step = 0
    for _ in range(epochs):
        for batch in _iterate(examples, batch_size, rng):
            y, mask, spk, _ = _batch_tensors(batch, out.dtype, False)
            with torch.no_grad():
                h = out.encoder(y, mask)
            loss = masked_mse(out.dec_atypical(h, spk, mask), y, mask)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            if log_rows is not None:
                log_rows.append({"step": step, "loss": loss.item()})
    for p in out.parameters():
        p.requires_grad_(True)
    out.eval()
    return out


@torch.no_grad()
def reconstruction_error(model, speaker_data, atypical=True):
    """Mean MSE of encode -> decoder over ``(mel, embedding)`` pairs."""
    conv = convert_atypical if atypical else convert_typical
    errs = [np.mean((conv(m, e, model).frames - as_frames(m)) ** 2) for m, e in speaker_data]
    return float(np.mean(errs))


# --------------------------------------------------------------------------
# paired data
# --------------------------------------------------------------------------


@dataclass
class PairedTriple:
    z_s: np.ndarray
    z_t: np.ndarray
    z_a: np.ndarray
    speaker_id: str
    source_utterance_id: str
    seed: int = 0
    triple_id: str = ""

    def __post_init__(self):
        if not (self.z_s.shape == self.z_t.shape == self.z_a.shape):
            raise InvalidInput(f"triple {self.triple_id}: z_s, z_t, z_a must share (T', F)")

    @property
    def n_frames(self):
        return self.z_s.shape[0]


@dataclass
class TripleSet:
    triples: list
    seconds: float
    exhausted: bool = False
    provenance: list = field(default_factory=list)


def generate_paired_triples(source, target, model, hours, frame_hop_ms, seed=0):
    """Convert source utterances until ``hours`` of paired data exist.

    ``source`` is an iterable of ``(utterance_id, mel)``; ``target`` a
    :class:`SpeakerEmbedding`.  Each triple holds the source mel plus its
    typical and atypical conversions to the target.  If the source runs
    out first a warning is issued and the partial set returned.
    """
    if hours < 0:
        raise InvalidInput("hours must be >= 0")
    target = target if isinstance(target, SpeakerEmbedding) else SpeakerEmbedding(target)
    budget = hours * 3600.0
    triples, provenance, seconds = [], [], 0.0
    if budget <= 0:
        return TripleSet([], 0.0)
    for k, (uid, mel) in enumerate(source):
        z_s = np.asarray(as_frames(mel), dtype=np.float32)
        z_t = convert_typical(z_s, target, model).frames
        z_a = convert_atypical(z_s, target, model).frames
        tid = f"{target.speaker_id}-{k:06d}"
        triples.append(PairedTriple(z_s, z_t, z_a, target.speaker_id, uid, seed, tid))
        provenance.append({"triple_id": tid, "source_id": uid, "speaker_id": target.speaker_id, "seed": seed})
        seconds += z_s.shape[0] * frame_hop_ms / 1000.0
        if seconds >= budget:
            return TripleSet(triples, seconds, False, provenance)
    warnings.warn(f"source corpus exhausted after {seconds / 3600:.3f} h of {hours} h", RuntimeWarning,
                  stacklevel=2)
    return TripleSet(triples, seconds, True, provenance)


def write_triples(out_dir, triple_set, frame_hop_ms):
    """Store triples as mel containers plus a JSON-lines provenance manifest."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = os.path.join(out_dir, "triples.jsonl")
    with open(manifest, "w", encoding="utf-8") as fh:
        for tr, prov in zip(triple_set.triples, triple_set.provenance):
            paths = {}
            for key in ("z_s", "z_t", "z_a"):
                rel = f"{tr.triple_id}.{key}.mel"
                save_mel(os.path.join(out_dir, rel), MelSpectrogram(getattr(tr, key), frame_hop_ms))
                paths[key] = rel
            fh.write(json.dumps({**prov, "paths": paths}, sort_keys=True) + "\n")
    return manifest


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_vc(path, model):
    torch.save({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                "hparams": asdict(model.hp), "state_dict": model.state_dict()}, path)


def load_vc(path):
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise InvalidInput(f"{path} is not a supported VC checkpoint")
    model = VcModel(VcHParams(**blob["hparams"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model
