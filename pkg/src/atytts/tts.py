"""Text-to-mel model: encoder, duration predictor, aligner and decoder.

Training uses hard monotonic alignment between the encoder output and the
target mel for ground-truth durations, and three MSE terms: aligned
encoder output vs target, predicted vs aligned log-durations, and decoder
output vs target on a random fixed-length crop.
"""
import hashlib
import logging
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .audio import FeatureConfig, MelSpectrogram, as_frames, griffin_lim
from .errors import InvalidInput, NumericalError
from .kernels import maximum_path
from .modules import DurationPredictor, MelDecoder, TextEncoder, masked_mse, pad_stack, sequence_mask
from .textfront import PhonemeSequence, PhonemeVocabulary, phonemize

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "atytts-tts"
CHECKPOINT_VERSION = 1


@dataclass
class TtsHParams:
    n_vocab: int
    n_feats: int = 80
    n_spks: int = 1
    spk_dim: int = 16
    enc_hidden: int = 96
    enc_layers: int = 3
    enc_kernel: int = 3
    dp_hidden: int = 64
    dp_kernel: int = 3
    dec_hidden: int = 96
    dec_layers: int = 5
    dec_kernel: int = 3
    dec_dilation: int = 2
    dec_center: bool = True
    dec_residual: bool = False
    max_frames: int = 2000
    crop_frames: int = 172


class TtsModel(nn.Module):
    def __init__(self, hp, vocab=None, speakers=None, feature_config=None):
        super().__init__()
        self.hp = hp
        self.vocab = vocab
        self.speakers = list(speakers) if speakers else [f"spk{i}" for i in range(hp.n_spks)]
        if len(self.speakers) != hp.n_spks:
            raise InvalidInput("one speaker name per embedding row")
        self.feature_config = feature_config or FeatureConfig(n_mels=hp.n_feats)
        self.encoder = TextEncoder(hp.n_vocab, hp.n_feats, hp.enc_hidden, hp.enc_layers, hp.enc_kernel)
        self.duration = DurationPredictor(hp.n_feats, hp.dp_hidden, hp.dp_kernel)
        self.decoder = MelDecoder(hp.n_feats, hp.spk_dim, hp.dec_hidden, hp.dec_layers, hp.dec_kernel,
                                  hp.dec_dilation, hp.dec_center, hp.dec_residual)
        self.spk_emb = nn.Embedding(hp.n_spks, hp.spk_dim)
        nn.init.normal_(self.spk_emb.weight, 0.0, 0.3)

    @classmethod
    def create(cls, vocab, speakers, seed=0, feature_config=None, **overrides):
        torch.manual_seed(seed)
        cfg = feature_config or FeatureConfig()
        hp = TtsHParams(n_vocab=len(vocab), n_feats=cfg.n_mels, n_spks=len(speakers), **overrides)
        return cls(hp, vocab, speakers, cfg)

    @property
    def dtype(self):
        return self.spk_emb.weight.dtype

    def speaker_index(self, speaker):
        if isinstance(speaker, str):
            try:
                return self.speakers.index(speaker)
            except ValueError:
                raise InvalidInput(f"unknown speaker {speaker!r}") from None
        idx = int(speaker)
        if not 0 <= idx < self.hp.n_spks:
            raise InvalidInput(f"speaker index {idx} out of range")
        return idx

    def add_speaker(self, name, init_from=None):
        """Append an embedding row for ``name`` (copied from ``init_from`` if given)."""
        if name in self.speakers:
            raise InvalidInput(f"speaker {name!r} already present")
        old = self.spk_emb.weight.data
        row = old[self.speaker_index(init_from)].clone() if init_from is not None else old.mean(0)
        emb = nn.Embedding(self.hp.n_spks + 1, self.hp.spk_dim).to(old.dtype)
        emb.weight.data.copy_(torch.cat([old, row[None]], dim=0))
        self.spk_emb = emb
        self.hp.n_spks += 1
        self.speakers.append(name)
        return self.hp.n_spks - 1

    def speaker_vectors(self, speakers):
        idx = torch.tensor([self.speaker_index(s) for s in speakers], dtype=torch.long)
        return self.spk_emb(idx)


# --------------------------------------------------------------------------
# inference-side operations (numpy in, numpy out)
# --------------------------------------------------------------------------


def _check_ids(ids, model):
    ids = np.asarray(ids.ids if isinstance(ids, PhonemeSequence) else ids, dtype=np.int64)
    if ids.ndim != 1 or len(ids) == 0:
        raise InvalidInput("phoneme sequence must be a non-empty 1-D id vector")
    if ids.min() < 1 or ids.max() >= model.hp.n_vocab:
        raise InvalidInput(f"phoneme id out of range [1, {model.hp.n_vocab})")
    return ids


def _encode_tensor(ids, model):
    x = torch.as_tensor(ids, dtype=torch.long)[None]
    mask = torch.ones(1, 1, x.shape[1], dtype=model.dtype)
    return model.encoder(x, mask), mask


@torch.no_grad()
def encode(z_x, model):
    """Phoneme ids -> latent phoneme features, shape (L, F)."""
    ids = _check_ids(z_x, model)
    mu_tilde, _ = _encode_tensor(ids, model)
    return mu_tilde[0].T.numpy()


@torch.no_grad()
def predict_durations(mu_tilde, model):
    """Latent phoneme features (L, F) -> log-durations (L,)."""
    x = np.asarray(mu_tilde)
    if x.ndim != 2 or x.shape[1] != model.hp.n_feats:
        raise InvalidInput(f"expected (L, {model.hp.n_feats}) features, got {x.shape}")
    t = torch.as_tensor(x, dtype=model.dtype).T[None]
    mask = torch.ones(1, 1, t.shape[-1], dtype=model.dtype)
    return model.duration(t, mask)[0].numpy()


def frame_counts(p_hat, max_frames=2000):
    """Per-phoneme frame counts ceil(exp(log_duration)), at least 1 and capped.

    A relative slack of 1e-9 keeps exp(log(k)) == k from rounding up to k + 1.
    """
    d = np.exp(np.asarray(p_hat, dtype=np.float64))
    counts = np.maximum(1, np.ceil(d * (1.0 - 1e-9))).astype(np.int64)
    if np.any(counts > max_frames):
        warnings.warn(f"duration above the {max_frames}-frame cap; capped", RuntimeWarning, stacklevel=2)
        counts = np.minimum(counts, max_frames)
    return counts


def align_infer(mu_tilde, p_hat, max_frames=2000):
    """Repeat row i of ``mu_tilde`` ceil(exp(p_hat[i])) times."""
    mu_tilde = np.asarray(mu_tilde)
    p_hat = np.asarray(p_hat)
    if mu_tilde.shape[0] != p_hat.shape[0]:
        raise InvalidInput("mu_tilde and p_hat disagree on the phoneme count")
    return np.repeat(mu_tilde, frame_counts(p_hat, max_frames), axis=0)


def alignment_cost(mu_tilde, z_y):
    """Squared distance between every phoneme feature and every mel frame, (L, T)."""
    a = np.asarray(mu_tilde, dtype=np.float64)
    b = np.asarray(as_frames(z_y), dtype=np.float64)
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)


def align_train(mu_tilde, z_y):
    """Hard monotonic alignment minimising the summed squared distance.

    Returns integer durations (L,), each >= 1, summing to T.
    """
    mu_tilde = np.asarray(mu_tilde)
    frames = as_frames(z_y)
    L, T = mu_tilde.shape[0], frames.shape[0]
    if mu_tilde.shape[1] != frames.shape[1]:
        raise InvalidInput("feature dimensions differ")
    if L > T:
        raise InvalidInput(f"{L} phonemes cannot be aligned to {T} frames")
    return maximum_path(alignment_cost(mu_tilde, frames))


def _decode_tensor(model, mu, spk_vec, max_frames):
    """mu: (F, T) tensor. Long inputs are decoded in overlapping chunks."""
    T = mu.shape[-1]
    if T <= max_frames:
        mask = torch.ones(1, 1, T, dtype=mu.dtype)
        return model.decoder(mu[None], spk_vec, mask)[0], []
    margin = model.decoder.receptive_field
    step = max_frames - 2 * margin
    if step <= 0:
        raise InvalidInput("max_frames too small for the decoder receptive field")
    mean = mu.mean(-1, keepdim=True)[None] if model.decoder.center else None
    out = torch.empty_like(mu)
    seams = []
    for start in range(0, T, step):
        stop = min(T, start + step)
        lo, hi = max(0, start - margin), min(T, stop + margin)
        chunk = mu[:, lo:hi]
        mask = torch.ones(1, 1, chunk.shape[-1], dtype=mu.dtype)
        dec = model.decoder(chunk[None], spk_vec, mask, mean)[0]
        out[:, start:stop] = dec[:, start - lo:stop - lo]
        if start:
            seams.append(start)
    return out, seams


@torch.no_grad()
def decode(mu, model, speaker):
    """Refine an aligned latent mel (T, F) into the output mel."""
    x = as_frames(mu)
    if x.ndim != 2 or x.shape[1] != model.hp.n_feats:
        raise InvalidInput(f"expected (T, {model.hp.n_feats}) input, got {x.shape}")
    t = torch.as_tensor(np.asarray(x), dtype=model.dtype).T
    out, seams = _decode_tensor(model, t, model.speaker_vectors([speaker]), model.hp.max_frames)
    meta = {"seams": seams} if seams else {}
    return MelSpectrogram(out.T.numpy(), model.feature_config.frame_hop_ms, meta)


def synthesize(text, model, lexicon, speaker, cfg=None, gl_iters=32, seed=0):
    """Text -> (mel, waveform); the waveform comes from Griffin-Lim."""
    cfg = cfg or model.feature_config
    seq = phonemize(text, lexicon)
    mu_tilde = encode(seq, model)
    p_hat = predict_durations(mu_tilde, model)
    mu = align_infer(mu_tilde, p_hat, model.hp.max_frames)
    mel = decode(mu, model, speaker)
    mel.meta["durations"] = frame_counts(p_hat, model.hp.max_frames).tolist()
    wave = griffin_lim(mel, cfg, iters=gl_iters, seed=seed) if gl_iters is not None else None
    return mel, wave


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def mse(a, b):
    """Mean of squared elementwise differences (torch or numpy operands)."""
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        if a.shape != b.shape:
            raise InvalidInput(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
        return ((a - b) ** 2).mean()
    a, b = np.asarray(as_frames(a), dtype=np.float64), np.asarray(as_frames(b), dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInput(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def loss_encoder(mu, z_y):
    return mse(mu, z_y)


def loss_duration(p_hat, p):
    return mse(p_hat, p)


def loss_decoder(z_hat, z_y):
    return mse(z_hat, z_y)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class TtsExample:
    ids: np.ndarray  # (L,)
    mel: np.ndarray  # (T, F)
    speaker: object
    utterance_id: str = ""


def make_example(record, mel, lexicon, speaker=None):
    seq = phonemize(record.transcript, lexicon)
    return TtsExample(seq.ids, np.asarray(mel), speaker if speaker is not None else record.speaker_id,
                      record.utterance_id)


def _crop_offsets(lengths, crop, rng):
    offsets = []
    for n in lengths:
        n = int(n)
        offsets.append(int(rng.integers(0, n - crop + 1)) if n > crop else 0)
    return offsets


def crop_batch(x, lengths, crop, offsets):
    """Crop (B, C, T) tensors at per-item offsets to (B, C, <=crop) plus mask."""
    sizes = [min(crop, int(n)) for n in lengths]
    out = torch.zeros(x.shape[0], x.shape[1], max(sizes), dtype=x.dtype)
    for i, (o, s) in enumerate(zip(offsets, sizes)):
        out[i, :, :s] = x[i, :, o:o + s]
    mask = sequence_mask(torch.tensor(sizes), max(sizes)).to(x.dtype)
    return out, mask


def tts_losses(model, batch, rng, durations=None):
    """Forward pass for a list of :class:`TtsExample`.

    Returns a dict of scalar tensors (``encoder``, ``duration``,
    ``decoder``) plus the durations used.  ``durations`` may be passed to
    bypass the monotonic alignment (gradient checks do this so that the
    loss is smooth in the parameters).
    """
    if not batch:
        raise InvalidInput("empty batch")
    n_feats = model.hp.n_feats
    for ex in batch:
        if ex.mel.shape[1] != n_feats:
            raise InvalidInput(f"{ex.utterance_id}: mel has {ex.mel.shape[1]} bins, model expects {n_feats}")
    dtype = model.dtype
    ids, x_len = pad_stack([ex.ids[None] for ex in batch], torch.long)
    ids = ids[:, 0]
    y, y_len = pad_stack([ex.mel.T for ex in batch], dtype)
    x_mask = sequence_mask(x_len, ids.shape[1]).to(dtype)
    y_mask = sequence_mask(y_len, y.shape[-1]).to(dtype)

    mu_tilde = model.encoder(ids, x_mask)
    log_dur_hat = model.duration(mu_tilde.detach(), x_mask)

    if durations is None:
        durations = []
        with torch.no_grad():
            for i in range(len(batch)):
                L, T = int(x_len[i]), int(y_len[i])
                durations.append(align_train(mu_tilde[i, :, :L].T.double().numpy(), y[i, :, :T].T.double().numpy()))
    attn = torch.zeros(len(batch), ids.shape[1], y.shape[-1], dtype=dtype)
    log_dur = torch.zeros(len(batch), ids.shape[1], dtype=dtype)
    for i, d in enumerate(durations):
        d = np.asarray(d)
        if d.sum() != int(y_len[i]):
            raise InvalidInput(f"durations for {batch[i].utterance_id} do not sum to the frame count")
        owner = np.repeat(np.arange(len(d)), d)
        attn[i, owner, np.arange(len(owner))] = 1.0
        log_dur[i, :len(d)] = torch.as_tensor(np.log(np.maximum(d, 1)), dtype=dtype)
    mu = torch.bmm(mu_tilde, attn)

    l_enc = masked_mse(mu, y, y_mask)
    l_dur = ((log_dur_hat - log_dur) ** 2 * x_mask[:, 0]).sum() / x_mask.sum()

    offsets = _crop_offsets(y_len, model.hp.crop_frames, rng)
    mu_c, c_mask = crop_batch(mu, y_len, model.hp.crop_frames, offsets)
    y_c, _ = crop_batch(y, y_len, model.hp.crop_frames, offsets)
    z_hat = model.decoder(mu_c, model.speaker_vectors([ex.speaker for ex in batch]), c_mask)
    l_dec = masked_mse(z_hat, y_c, c_mask)
    return {"encoder": l_enc, "duration": l_dur, "decoder": l_dec, "durations": durations}


def make_optimizer(model, lr=1e-4, params=None):
    return torch.optim.Adam(params if params is not None else model.parameters(),
                            lr=lr, betas=(0.9, 0.999), eps=1e-8)


def check_finite(losses, batch):
    for name, value in losses.items():
        if isinstance(value, torch.Tensor) and not torch.isfinite(value).all():
            ids = [getattr(ex, "utterance_id", "?") for ex in batch]
            raise NumericalError(f"non-finite {name} loss on batch {ids}")


def train_step(batch, model, optimizer, rng):
    """One Adam step on encoder + duration + decoder losses.

    Returns the float breakdown; ``total`` is the exact scalar that was
    back-propagated.
    """
    model.train()
    losses = tts_losses(model, batch, rng)
    terms = {k: losses[k] for k in ("encoder", "duration", "decoder")}
    check_finite(terms, batch)
    total = terms["encoder"] + terms["duration"] + terms["decoder"]
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    out = {k: v.item() for k, v in terms.items()}
    out["total"] = total.item()
    return out


def iterate_batches(items, batch_size, rng):
    order = rng.permutation(len(items))
    for start in range(0, len(items), batch_size):
        yield [items[i] for i in order[start:start + batch_size]]


def train_tts(model, examples, epochs, batch_size=16, lr=1e-4, seed=0, log_rows=None):
    """Plain training loop; appends per-step breakdown rows to ``log_rows``."""
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    opt = make_optimizer(model, lr)
    step = 0
    for _ in range(epochs):
        for batch in iterate_batches(examples, batch_size, rng):
            row = train_step(batch, model, opt, rng)
            step += 1
            if log_rows is not None:
                log_rows.append({"step": step, **row})
    model.eval()
    return model


@torch.no_grad()
def teacher_forced_mel(model, ex, durations, speaker=None):
    """Decoder output given ground-truth durations (no duration prediction)."""
    ids = _check_ids(ex.ids, model)
    mu_tilde, _ = _encode_tensor(ids, model)
    mu = torch.repeat_interleave(mu_tilde[0], torch.as_tensor(np.asarray(durations)), dim=1)
    spk = model.speaker_vectors([speaker if speaker is not None else ex.speaker])
    out, _ = _decode_tensor(model, mu, spk, model.hp.max_frames)
    return out.T.numpy()


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_tts(path, model):
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "hparams": asdict(model.hp),
        "vocab": list(model.vocab.symbols) if model.vocab else None,
        "vocab_hash": model.vocab.digest() if model.vocab else None,
        "speakers": model.speakers,
        "feature_config": model.feature_config.to_dict(),
        "state_dict": model.state_dict(),
    }, path)


def load_tts(path):
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInput(f"{path} is not a TTS checkpoint")
    if blob["version"] != CHECKPOINT_VERSION:
        raise InvalidInput(f"{path}: unsupported checkpoint version {blob['version']}")
    vocab = PhonemeVocabulary(blob["vocab"]) if blob["vocab"] else None
    if vocab is not None and vocab.digest() != blob["vocab_hash"]:
        raise InvalidInput(f"{path}: vocabulary hash mismatch")
    model = TtsModel(TtsHParams(**blob["hparams"]), vocab, blob["speakers"],
                     FeatureConfig(**blob["feature_config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model


def parameter_digest(module):
    """Stable hash of a module's parameters (bitwise)."""
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()
