"""Signal-level augmentation baselines: waveform perturbation and spectrogram masking.

Composition order is fixed: :func:`wave_augment` first, then the mel is
computed, then :func:`spec_augment`.
"""
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import yaml
from scipy.signal import resample

from .audio import MelSpectrogram, Waveform, as_frames, mel_spectrogram
from .errors import InvalidInput


@dataclass(frozen=True)
class AugmentPolicy:
    time_mask_count: int = 2
    time_mask_max_width: int = 27
    freq_mask_count: int = 2
    freq_mask_max_width: int = 10
    speed_factors: tuple = (0.9, 1.0, 1.1)
    gain_db_range: tuple = (-6.0, 6.0)
    noise_snr_db_range: tuple = (15.0, 30.0)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "speed_factors", tuple(float(s) for s in self.speed_factors))
        object.__setattr__(self, "gain_db_range", tuple(float(g) for g in self.gain_db_range))
        object.__setattr__(self, "noise_snr_db_range", tuple(float(g) for g in self.noise_snr_db_range))
        counts = (self.time_mask_count, self.time_mask_max_width, self.freq_mask_count, self.freq_mask_max_width)
        if min(counts) < 0:
            raise InvalidInput("mask counts and widths must be >= 0")
        if not self.speed_factors or min(self.speed_factors) <= 0:
            raise InvalidInput("speed factors must be > 0")
        for name in ("gain_db_range", "noise_snr_db_range"):
            lo, hi = getattr(self, name)
            if lo > hi or math.isnan(lo) or math.isnan(hi):
                raise InvalidInput(f"{name} must be an ordered interval")

    @classmethod
    def identity(cls, seed=0):
        return cls(0, 0, 0, 0, (1.0,), (0.0, 0.0), (math.inf, math.inf), seed)

    @classmethod
    def spec_only(cls, seed=0, **kw):
        return cls(speed_factors=(1.0,), gain_db_range=(0.0, 0.0), noise_snr_db_range=(math.inf, math.inf),
                   seed=seed, **kw)

    def with_seed(self, seed):
        d = asdict(self)
        d["seed"] = int(seed)
        return AugmentPolicy(**d)

    def to_dict(self):
        d = asdict(self)
        for k in ("speed_factors", "gain_db_range", "noise_snr_db_range"):
            d[k] = [v if math.isfinite(v) else str(v) for v in d[k]]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("speed_factors", "gain_db_range", "noise_snr_db_range"):
            if k in d:
                d[k] = tuple(float(v) for v in d[k])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidInput(f"unknown policy fields: {sorted(unknown)}")
        return cls(**d)


def save_policy(path, policy):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(policy.to_dict(), fh, sort_keys=True)


def load_policy(path):
    with open(path, encoding="utf-8") as fh:
        return AugmentPolicy.from_dict(yaml.safe_load(fh) or {})


def _rng(policy, key):
    return np.random.default_rng([int(policy.seed), key])


def apply_masks(frames, time_masks=(), freq_masks=()):
    """Fill ``(start, width)`` ranges with the utterance mean (computed before masking)."""
    out = np.array(frames, copy=True)
    fill = out.mean(dtype=np.float64).astype(out.dtype)
    for start, width in time_masks:
        out[start:start + width, :] = fill
    for start, width in freq_masks:
        out[:, start:start + width] = fill
    return out


def _draw_masks(rng, count, max_width, dim, axis):
    if max_width >= dim and count > 0:
        warnings.warn(f"{axis} mask width {max_width} >= dimension {dim}; clamped", RuntimeWarning, stacklevel=3)
        max_width = dim
    masks = []
    for _ in range(count):
        width = int(rng.integers(0, max_width + 1))
        start = int(rng.integers(0, dim - width + 1))
        masks.append((start, width))
    return masks


def spec_augment(m, policy):
    """Time and frequency masking; unmasked cells are untouched."""
    frames = np.asarray(as_frames(m))
    if frames.ndim != 2 or frames.size == 0:
        raise InvalidInput("spec_augment expects a non-empty (T, F) mel")
    T, F = frames.shape
    rng = _rng(policy, 1)
    tm = _draw_masks(rng, policy.time_mask_count, policy.time_mask_max_width, T, "time")
    fm = _draw_masks(rng, policy.freq_mask_count, policy.freq_mask_max_width, F, "frequency")
    out = apply_masks(frames, tm, fm)
    if isinstance(m, MelSpectrogram):
        return MelSpectrogram(out, m.frame_hop, {**m.meta, "time_masks": tm, "freq_masks": fm})
    return out


def change_speed(samples, factor):
    """Resample so that playback is ``factor`` times faster (length ``round(N / factor)``)."""
    if factor <= 0:
        raise InvalidInput("speed factor must be > 0")
    if factor == 1.0:
        return samples
    n_out = max(1, int(round(len(samples) / factor)))
    return resample(samples, n_out)


def wave_augment(w, policy):
    """Seeded speed perturbation, gain and white noise; output clipped to [-1, 1].

    The identity policy returns the input samples unchanged.
    """
    rng = _rng(policy, 2)
    x = w.samples
    speed = policy.speed_factors[int(rng.integers(len(policy.speed_factors)))]
    gain_db = float(rng.uniform(*policy.gain_db_range)) if policy.gain_db_range[1] > policy.gain_db_range[0] \
        else policy.gain_db_range[0]
    lo, hi = policy.noise_snr_db_range
    snr_db = float(rng.uniform(lo, hi)) if math.isfinite(hi) and hi > lo else lo
    meta = {"speed": speed, "gain_db": gain_db, "snr_db": snr_db}
    x = change_speed(x, speed)
    if gain_db != 0.0:
        x = x * 10.0 ** (gain_db / 20.0)
    if math.isfinite(snr_db):
        power = float(np.mean(x ** 2))
        noise = rng.standard_normal(len(x)) * math.sqrt(power / 10.0 ** (snr_db / 10.0))
        x = x + noise
    if x is not w.samples:
        x = np.clip(x, -1.0, 1.0)
    return Waveform(x, w.sample_rate, {**w.meta, **meta})


def augment_utterance(w, policy, cfg=None):
    """Wave augmentation followed by mel extraction and spectrogram masking."""
    return spec_augment(mel_spectrogram(wave_augment(w, policy), cfg), policy)


__all__ = ["AugmentPolicy", "apply_masks", "augment_utterance", "change_speed", "load_policy",
           "save_policy", "spec_augment", "wave_augment"]
