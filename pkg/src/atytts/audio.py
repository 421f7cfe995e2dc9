"""Waveform I/O, log-mel extraction and Griffin-Lim inversion.

Framing follows the HiFi-GAN / Grad-TTS convention: the signal is reflect
padded by ``(n_fft - hop) / 2`` on both sides and framed without further
centering, so a signal of ``N`` samples yields ``N // hop`` frames and
frame ``t`` is centred on sample ``t * hop + hop / 2``.
"""
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.signal
from scipy.io import wavfile

from .errors import InvalidInput
from .kernels import overlap_add

MEL_MAGIC = b"ATYM"
MEL_VERSION = 1
_MEL_HEADER = struct.Struct("<4sIIId")


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 22050
    win_ms: float = 46.4
    hop_ms: float = 11.6
    n_fft: int = 1024
    hop_samples: int = 256
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise InvalidInput("sample_rate must be positive")
        if not 0 < self.hop_samples <= self.n_fft:
            raise InvalidInput("need 0 < hop_samples <= n_fft")
        if (self.n_fft - self.hop_samples) % 2:
            raise InvalidInput("n_fft - hop_samples must be even")
        if not 0 < self.n_mels <= self.n_fft // 2 + 1:
            raise InvalidInput("n_mels must be in [1, n_fft/2 + 1]")
        if not 0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise InvalidInput("need 0 <= f_min < f_max <= nyquist")
        if self.log_floor <= 0:
            raise InvalidInput("log_floor must be positive")

    @property
    def frame_hop_ms(self):
        """Exact hop in milliseconds (the nominal ``hop_ms`` is rounded)."""
        return 1000.0 * self.hop_samples / self.sample_rate

    @property
    def n_freqs(self):
        return self.n_fft // 2 + 1

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InvalidInput("waveform must be mono (1-D)")
        if self.sample_rate <= 0:
            raise InvalidInput("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInput("waveform contains non-finite samples")

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # (T, F) natural-log mel energies
    frame_hop: float  # ms
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise InvalidInput(f"mel must be a non-empty (T, F) matrix, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise InvalidInput("mel contains non-finite values")

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def n_mels(self):
        return self.frames.shape[1]


def as_frames(m):
    """Accept a MelSpectrogram or any (T, F) array-like and return the array."""
    if isinstance(m, MelSpectrogram):
        return m.frames
    return np.asarray(m)


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------


def resample(w, target_rate):
    """Band-limited (FFT) resampling to ``target_rate``."""
    if target_rate <= 0:
        raise InvalidInput("target_rate must be positive")
    if len(w.samples) == 0:
        raise InvalidInput("cannot resample an empty signal")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    n_out = int(round(len(w.samples) * target_rate / w.sample_rate))
    if n_out < 1:
        raise InvalidInput("signal too short for the requested rate")
    return Waveform(scipy.signal.resample(w.samples, n_out), int(target_rate))


# --------------------------------------------------------------------------
# mel filterbank (Slaney scale and area normalisation, as librosa's default)
# --------------------------------------------------------------------------

_F_SP = 200.0 / 3
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOGSTEP = np.log(6.4) / 27.0


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    linear = f / _F_SP
    log = _MIN_LOG_MEL + np.log(np.maximum(f, _MIN_LOG_HZ) / _MIN_LOG_HZ) / _LOGSTEP
    return np.where(f >= _MIN_LOG_HZ, log, linear)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    linear = _F_SP * m
    log = _MIN_LOG_HZ * np.exp(_LOGSTEP * (m - _MIN_LOG_MEL))
    return np.where(m >= _MIN_LOG_MEL, log, linear)


def mel_center_frequencies(cfg):
    """Centre frequency (Hz) of each mel filter."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    return edges[1:-1]


@lru_cache(maxsize=16)
def _filterbank(cfg):
    fft_freqs = np.linspace(0.0, cfg.sample_rate / 2, cfg.n_freqs)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    fb = np.maximum(0.0, np.minimum(lower, upper))
    fb *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    fb.setflags(write=False)
    return fb


def mel_filterbank(cfg):
    """(n_mels, n_fft/2 + 1) triangular filterbank; read-only and cached."""
    return _filterbank(cfg)


@lru_cache(maxsize=16)
def _inverse_filterbank(cfg):
    inv = np.linalg.pinv(_filterbank(cfg))
    inv.setflags(write=False)
    return inv


@lru_cache(maxsize=16)
def _window(n_fft):
    # periodic Hann, as torch.hann_window / scipy get_window('hann')
    win = scipy.signal.get_window("hann", n_fft, fftbins=True)
    win.setflags(write=False)
    return win


# --------------------------------------------------------------------------
# STFT
# --------------------------------------------------------------------------


def stft(samples, cfg):
    """Complex STFT, shape (T, n_fft/2 + 1), with T = len(samples) // hop."""
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) < cfg.n_fft:
        raise InvalidInput(
            f"signal of {len(samples)} samples is shorter than one window ({cfg.n_fft})")
    pad = (cfg.n_fft - cfg.hop_samples) // 2
    padded = np.pad(samples, (pad, pad), mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(padded, cfg.n_fft)[::cfg.hop_samples]
    return np.fft.rfft(frames * _window(cfg.n_fft), axis=-1)


def istft(spec, cfg):
    """Inverse of :func:`stft`; output length is ``T * hop``."""
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=-1)
    signal, norm = overlap_add(frames, _window(cfg.n_fft), cfg.hop_samples)
    nz = norm > 1e-10
    signal[nz] /= norm[nz]
    pad = (cfg.n_fft - cfg.hop_samples) // 2
    return signal[pad:pad + spec.shape[0] * cfg.hop_samples]


def mel_spectrogram(w, cfg=None):
    """Natural-log mel spectrogram (T, n_mels) of a waveform."""
    cfg = cfg or FeatureConfig()
    if w.sample_rate != cfg.sample_rate:
        raise InvalidInput(f"waveform is {w.sample_rate} Hz, config expects {cfg.sample_rate} Hz")
    mag = np.abs(stft(w.samples, cfg))
    mel = mag @ mel_filterbank(cfg).T
    frames = np.log(np.maximum(mel, cfg.log_floor))
    return MelSpectrogram(frames, cfg.frame_hop_ms)


def spectral_convergence(target_mag, mag):
    return float(np.linalg.norm(target_mag - mag) / max(np.linalg.norm(target_mag), 1e-12))


def mel_to_linear(m, cfg):
    """Approximate linear magnitudes from a log-mel matrix (pseudo-inverse, clipped)."""
    frames = as_frames(m).astype(np.float64)
    energy = np.exp(frames)
    energy[frames <= np.log(cfg.log_floor) + 1e-6] = 0.0
    return np.maximum(energy @ _inverse_filterbank(cfg).T, 0.0)


def griffin_lim(m, cfg=None, iters=32, seed=0):
    """Invert a log-mel spectrogram with Griffin-Lim phase reconstruction.

    ``iters=0`` returns the zero-phase reconstruction and marks it in
    ``meta['phase']``.  Spectral convergence of every iteration is kept in
    ``meta['convergence']``.
    """
    cfg = cfg or FeatureConfig()
    if iters < 0:
        raise InvalidInput("iters must be >= 0")
    frames = as_frames(m)
    if frames.shape[1] != cfg.n_mels:
        raise InvalidInput(f"mel has {frames.shape[1]} bins, config expects {cfg.n_mels}")
    mag = mel_to_linear(frames, cfg)
    if iters == 0:
        samples = istft(mag.astype(np.complex128), cfg)
        return Waveform(samples, cfg.sample_rate, {"phase": "zero", "iters": 0, "convergence": []})

    rng = np.random.default_rng(seed)
    angles = np.exp(2j * np.pi * rng.random(mag.shape))
    history = []
    samples = istft(mag * angles, cfg)
    for _ in range(iters):
        rebuilt = stft(samples, cfg) if len(samples) >= cfg.n_fft else None
        if rebuilt is None:
            break
        history.append(spectral_convergence(mag, np.abs(rebuilt)))
        angles = np.exp(1j * np.angle(rebuilt))
        samples = istft(mag * angles, cfg)
    return Waveform(samples, cfg.sample_rate, {"phase": "griffin-lim", "iters": iters, "convergence": history})


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------


def read_wav(path):
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise InvalidInput(f"{path}: only mono WAV is supported")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    else:
        samples = data.astype(np.float64)
    return Waveform(samples, int(rate))


def write_wav(path, w, subtype="PCM_16"):
    """Write mono WAV; ``subtype`` is ``"PCM_16"`` or ``"FLOAT"``."""
    samples = np.clip(w.samples, -1.0, 1.0)
    if subtype == "PCM_16":
        data = np.clip(np.round(samples * 32768.0), -32768, 32767).astype(np.int16)
    elif subtype == "FLOAT":
        data = samples.astype(np.float32)
    else:
        raise InvalidInput(f"unsupported WAV subtype {subtype!r}")
    wavfile.write(path, w.sample_rate, data)


def save_mel(path, m):
    frames = np.ascontiguousarray(as_frames(m), dtype="<f4")
    T, F = frames.shape
    hop = m.frame_hop if isinstance(m, MelSpectrogram) else 0.0
    with open(path, "wb") as fh:
        fh.write(_MEL_HEADER.pack(MEL_MAGIC, MEL_VERSION, T, F, float(hop)))
        fh.write(frames.tobytes())


def load_mel(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _MEL_HEADER.size:
        raise InvalidInput(f"{path}: truncated mel container")
    magic, version, T, F, hop = _MEL_HEADER.unpack_from(blob)
    if magic != MEL_MAGIC:
        raise InvalidInput(f"{path}: bad magic {magic!r}")
    if version != MEL_VERSION:
        raise InvalidInput(f"{path}: unsupported mel container version {version}")
    payload = blob[_MEL_HEADER.size:]
    if len(payload) != 4 * T * F:
        raise InvalidInput(f"{path}: payload size does not match header")
    frames = np.frombuffer(payload, dtype="<f4").reshape(T, F).astype(np.float32)
    return MelSpectrogram(frames, hop)
