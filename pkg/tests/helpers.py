"""Shared toy builders and a central-difference gradient checker."""
import numpy as np
import torch

from atytts.audio import FeatureConfig
from atytts.textfront import PhonemeVocabulary
from atytts.tts import TtsExample, TtsModel
from atytts.vc import VcModel

TOY_PHONES = ["a", "b", "c", "d"]


def toy_tts(seed=0, n_feats=6, speakers=("s0", "s1"), dtype=torch.float64, crop=64):
    vocab = PhonemeVocabulary.build(TOY_PHONES, char_fallback=False)
    cfg = FeatureConfig(n_mels=n_feats)
    model = TtsModel.create(vocab, list(speakers), seed=seed, feature_config=cfg, spk_dim=3, enc_hidden=8,
                            enc_layers=2, dp_hidden=6, dec_hidden=8, dec_layers=2, crop_frames=crop)
    return model.to(dtype)


def toy_vc(seed=0, n_feats=6, spk_dim=5, dtype=torch.float64):
    return VcModel.create(seed=seed, n_feats=n_feats, spk_dim=spk_dim, enc_hidden=8, enc_layers=2,
                          dec_hidden=8, dec_layers=2).to(dtype)


def toy_batch(model, rng, sizes=((3, 7), (4, 9)), speakers=("s0", "s1")):
    out = []
    for k, (L, T) in enumerate(sizes):
        ids = rng.integers(1, model.hp.n_vocab, size=L)
        mel = rng.standard_normal((T, model.hp.n_feats))
        out.append(TtsExample(ids, mel, speakers[k % len(speakers)], f"u{k}"))
    return out


def random_durations(rng, sizes):
    out = []
    for L, T in sizes:
        cuts = np.sort(rng.choice(np.arange(1, T), size=L - 1, replace=False))
        out.append(np.diff(np.concatenate([[0], cuts, [T]])))
    return out


def gradcheck(loss_fn, params, rng, n_coords=12, eps=1e-6):
    """Relative error between autograd and central differences on random coordinates.

    ``loss_fn()`` must rebuild the loss from scratch on each call.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    analytic, numeric = [], []
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        flat = p.data.view(-1)
        for idx in rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False):
            old = flat[idx].item()
            flat[idx] = old + eps
            up = loss_fn().item()
            flat[idx] = old - eps
            down = loss_fn().item()
            flat[idx] = old
            numeric.append((up - down) / (2 * eps))
            analytic.append(g.view(-1)[idx].item())
    a, n = np.array(analytic), np.array(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale), float(np.linalg.norm(a))
