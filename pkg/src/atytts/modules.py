"""Convolutional building blocks shared by the TTS and VC models.

All tensors are channels-first: (batch, channels, time).  Masks are
(batch, 1, time) with 1 on valid positions.
"""
import torch
from torch import nn


def sequence_mask(lengths, max_len=None):
    max_len = int(max_len or lengths.max())
    return (torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]).unsqueeze(1)


class ResidualConvStack(nn.Module):
    def __init__(self, channels, n_layers, kernel_size, dilation_growth=1):
        super().__init__()
        self.dilations = [dilation_growth ** i for i in range(n_layers)]
        self.convs = nn.ModuleList(
            nn.Conv1d(channels, channels, kernel_size, padding=d * (kernel_size // 2), dilation=d)
            for d in self.dilations)
        self.act = nn.SiLU()

    def forward(self, x, mask, cond=None):
        for i, conv in enumerate(self.convs):
            h = x if cond is None else x + cond[i]
            x = x + self.act(conv(h * mask))
        return x * mask


class TextEncoder(nn.Module):
    """Phoneme ids -> per-phoneme latent mel features (B, n_feats, L)."""

    def __init__(self, n_vocab, n_feats, hidden, n_layers, kernel_size):
        super().__init__()
        self.emb = nn.Embedding(n_vocab, hidden)
        nn.init.normal_(self.emb.weight, 0.0, hidden ** -0.5)
        self.stack = ResidualConvStack(hidden, n_layers, kernel_size)
        self.proj = nn.Conv1d(hidden, n_feats, 1)

    def forward(self, ids, mask):
        x = self.emb(ids).transpose(1, 2) * mask
        return self.proj(self.stack(x, mask)) * mask


class DurationPredictor(nn.Module):
    """Latent phoneme features -> log frame counts (B, L)."""

    def __init__(self, n_feats, hidden, kernel_size):
        super().__init__()
        pad = kernel_size // 2
        self.conv1 = nn.Conv1d(n_feats, hidden, kernel_size, padding=pad)
        self.conv2 = nn.Conv1d(hidden, hidden, kernel_size, padding=pad)
        self.proj = nn.Conv1d(hidden, 1, 1)
        self.act = nn.SiLU()

    def forward(self, x, mask):
        x = self.act(self.conv1(x * mask))
        x = self.act(self.conv2(x * mask))
        return (self.proj(x * mask) * mask).squeeze(1)


class MelDecoder(nn.Module):
    """Speaker-conditioned mel-to-mel refinement network.

    ``out = x + net([x; e])`` when residual.  With ``center`` the input's
    utterance mean is removed first and a speaker bias added at the end,
    so the network only has to shape the within-utterance contour.  The
    same architecture serves as the TTS decoder and both VC decoders.
    """

    def __init__(self, n_feats, spk_dim, hidden, n_layers, kernel_size, dilation_growth=1, center=False,
                 residual=True):
        super().__init__()
        pad = kernel_size // 2
        self.residual = residual
        self.inp = nn.Conv1d(n_feats + spk_dim, hidden, kernel_size, padding=pad)
        self.stack = ResidualConvStack(hidden, n_layers, kernel_size, dilation_growth)
        self.spk_proj = nn.Linear(spk_dim, hidden * n_layers)
        self.out = nn.Conv1d(hidden, n_feats, 1)
        self.act = nn.SiLU()
        self.n_layers = n_layers
        self.center = center
        if center:
            self.spk_bias = nn.Linear(spk_dim, n_feats)
        half = kernel_size // 2
        self.receptive_field = 1 + 2 * half * (1 + sum(self.stack.dilations))

    def forward(self, x, spk, mask, mean=None):
        if self.center:
            if mean is None:
                mean = (x * mask).sum(-1, keepdim=True) / mask.sum(-1, keepdim=True)
            x = (x - mean) * mask
        cond = spk[:, :, None].expand(-1, -1, x.shape[-1])
        h = self.act(self.inp(torch.cat([x, cond], dim=1) * mask))
        per_layer = self.spk_proj(spk).view(spk.shape[0], self.n_layers, -1, 1).unbind(1)
        y = self.out(self.stack(h, mask, per_layer))
        if self.residual:
            y = y + x
        if self.center:
            y = y + self.spk_bias(spk)[:, :, None]
        return y * mask


class MelEncoder(nn.Module):
    """Mel -> speaker-independent hidden representation (B, hidden, T)."""

    def __init__(self, n_feats, hidden, n_layers, kernel_size, out_dim=None):
        super().__init__()
        pad = kernel_size // 2
        self.inp = nn.Conv1d(n_feats, hidden, kernel_size, padding=pad)
        self.stack = ResidualConvStack(hidden, n_layers, kernel_size)
        self.out = nn.Conv1d(hidden, out_dim or n_feats, 1)
        self.act = nn.SiLU()

    def forward(self, x, mask):
        return self.out(self.stack(self.act(self.inp(x * mask)), mask)) * mask


def masked_mse(pred, target, mask):
    """Mean squared error over valid positions and all channels."""
    diff = (pred - target) ** 2 * mask
    return diff.sum() / (mask.sum() * pred.shape[1])


def pad_stack(arrays, dtype):
    """Pad a list of (C, T_i) arrays to (B, C, T_max); returns (tensor, lengths)."""
    lengths = torch.tensor([a.shape[-1] for a in arrays], dtype=torch.long)
    out = torch.zeros(len(arrays), arrays[0].shape[0], int(lengths.max()), dtype=dtype)
    for i, a in enumerate(arrays):
        out[i, :, :a.shape[-1]] = torch.as_tensor(a, dtype=dtype)
    return out, lengths
