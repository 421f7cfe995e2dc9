"""Deterministic synthetic pseudo-speech corpus.

Utterances are harmonic stacks shaped by per-phoneme formant envelopes
plus band-limited noise for fricatives and stops.  Because the renderer
knows every phoneme boundary, ground-truth durations are exact, and
"what speaker B would have said" for any utterance of speaker A can be
rendered directly (same text and durations, B's profile).  Those oracle
renderings are what the VC and Aty-TTS experiments are scored against.

Atypical speakers apply a four-parameter transform whose strength grows
with severity: slower articulation, longer pauses, a steeper spectral
roll-off and pitch jitter.
"""
import json
import os
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .audio import FeatureConfig, InvalidInput, MelSpectrogram, Waveform, istft, mel_spectrogram, write_wav
from .kernels import harmonic_stack
from .manifest import UtteranceRecord, read_manifest, write_manifest
from .textfront import BOUNDARY, Lexicon, PhonemeVocabulary, normalize_text

# name: (F1, F2, F3, gain_db, noise_level, noise_center_hz, voiced, base_frames)
PHONEMES = {
    "aa": (730, 1090, 2440, 0.0, 0.0, 0, True, 7),
    "iy": (270, 2290, 3010, -1.0, 0.0, 0, True, 7),
    "uw": (300, 870, 2240, -1.0, 0.0, 0, True, 7),
    "eh": (530, 1840, 2480, 0.0, 0.0, 0, True, 6),
    "ao": (570, 840, 2410, 0.0, 0.0, 0, True, 7),
    "ae": (660, 1720, 2410, 0.0, 0.0, 0, True, 6),
    "ih": (390, 1990, 2550, -1.0, 0.0, 0, True, 5),
    "er": (490, 1350, 1690, -2.0, 0.0, 0, True, 6),
    "m": (280, 1000, 2200, -9.0, 0.0, 0, True, 5),
    "n": (280, 1700, 2600, -9.0, 0.0, 0, True, 5),
    "l": (360, 1300, 2700, -5.0, 0.0, 0, True, 5),
    "r": (420, 1200, 1600, -5.0, 0.0, 0, True, 5),
    "w": (300, 700, 2200, -6.0, 0.0, 0, True, 4),
    "y": (280, 2200, 3000, -6.0, 0.0, 0, True, 4),
    "z": (250, 1500, 2500, -16.0, 0.25, 5500, True, 5),
    "s": (0, 0, 0, 0.0, 0.35, 6000, False, 6),
    "sh": (0, 0, 0, 0.0, 0.35, 3000, False, 6),
    "f": (0, 0, 0, 0.0, 0.12, 4500, False, 5),
    "p": (0, 0, 0, 0.0, 0.10, 1000, False, 3),
    "t": (0, 0, 0, 0.0, 0.15, 4000, False, 3),
    "k": (0, 0, 0, 0.0, 0.12, 2000, False, 3),
}
PAUSE_FRAMES = 3
VOWELS = ("aa", "iy", "uw", "eh", "ao", "ae", "ih", "er")
CONSONANTS = tuple(p for p in PHONEMES if p not in VOWELS)

_BANDWIDTHS = (90.0, 130.0, 190.0)
_FORMANT_GAINS = (1.0, 0.55, 0.3)
_BASE_TILT_DB = -3.0  # dB/octave re 500 Hz
_MAX_HARMONIC_HZ = 7600.0
_OUTPUT_GAIN = 0.03
_NOISE_FLOOR = 2e-4

AVERAGE_PITCH = 150.0
SPEAKER_DIM = 17  # 4x4 timbre grid + tilt

WAKEWORD = "hey jay"

INTENT_TEMPLATES = {
    "activate_lights": ["turn on the lights in the {location}", "switch on the {location} lights"],
    "deactivate_lights": ["turn off the lights in the {location}", "switch off the {location} lights"],
    "increase_heat": ["turn up the heat in the {location}", "make the {location} warmer"],
    "decrease_heat": ["turn down the heat in the {location}", "make the {location} cooler"],
    "activate_music": ["play some music", "play music in the {location}"],
    "deactivate_music": ["stop the music", "stop music in the {location}"],
    "increase_volume": ["turn up the volume", "make it louder"],
    "decrease_volume": ["turn down the volume", "make it quieter"],
    "bring_item": ["bring me my {item}", "fetch the {item}"],
    "change_language": ["switch the language to {language}", "set language to {language}"],
}
ENTITY_VALUES = {
    "location": ("kitchen", "bedroom", "washroom", "garden"),
    "item": ("newspaper", "shoes", "socks", "juice"),
    "language": ("english", "german", "korean", "chinese"),
}


@dataclass(frozen=True)
class AtypicalTransform:
    time_stretch: float = 1.0
    spectral_tilt: float = 0.0  # extra dB/octave, <= 0
    jitter_depth: float = 0.0  # relative f0 deviation
    pause_scale: float = 1.0

    def __post_init__(self):
        if self.time_stretch < 1.0 or self.pause_scale < 1.0:
            raise InvalidInput("time_stretch and pause_scale must be >= 1")
        if self.jitter_depth < 0:
            raise InvalidInput("jitter_depth must be >= 0")

    @classmethod
    def from_severity(cls, severity):
        """Monotone map from a 0-4 severity rating; identity at 0."""
        if not 0.0 <= severity <= 4.0:
            raise InvalidInput(f"severity {severity} outside [0, 4]")
        s = float(severity)
        return cls(time_stretch=1.0 + 0.15 * s, spectral_tilt=-1.5 * s,
                   jitter_depth=0.012 * s, pause_scale=1.0 + 0.5 * s)

    @property
    def is_identity(self):
        return self == AtypicalTransform()


@dataclass(frozen=True)
class SyntheticSpeakerProfile:
    speaker_id: str
    formant_scale: float
    pitch: float
    rate: float = 1.0
    tilt: float = 0.0  # speaker-specific dB/octave offset
    severity: float = 0.0
    transform: AtypicalTransform = field(default_factory=AtypicalTransform)

    def __post_init__(self):
        if (self.severity == 0.0) != self.transform.is_identity:
            raise InvalidInput("severity 0 iff identity transform")

    @property
    def atypical(self):
        return self.severity > 0.0

    @property
    def base_formants(self):
        return [self.formant_scale * v for v in (500.0, 1500.0, 2500.0)]

    def typical_twin(self):
        """Same timbre with the atypical transform removed."""
        return replace(self, severity=0.0, transform=AtypicalTransform())


AVERAGE_PROFILE = SyntheticSpeakerProfile("average", formant_scale=1.0, pitch=AVERAGE_PITCH)


def _speaker_rng(speaker_id, seed):
    return np.random.default_rng([int(seed), zlib.crc32(speaker_id.encode())])


def make_profile(speaker_id, seed, severity=0.0):
    rng = _speaker_rng(speaker_id, seed)
    return SyntheticSpeakerProfile(
        speaker_id=speaker_id,
        formant_scale=float(np.exp(rng.uniform(np.log(0.85), np.log(1.2)))),
        pitch=float(np.exp(rng.uniform(np.log(95.0), np.log(230.0)))),
        rate=float(rng.uniform(0.9, 1.1)),
        tilt=float(rng.uniform(-1.0, 1.0)),
        severity=float(severity),
        transform=AtypicalTransform.from_severity(severity),
    )


def timbre_embedding(profile, dim=SPEAKER_DIM):
    """Fixed unit-norm speaker vector from timbre alone (formants, pitch, tilt).

    Stands in for a pre-trained speaker-verification d-vector: smooth in
    the timbre parameters, blind to the atypical transform.
    """
    x = np.array([
        np.log(profile.formant_scale) / np.log(1.2),
        np.log(profile.pitch / AVERAGE_PITCH) / np.log(1.6),
        profile.tilt,
    ])
    side = int(round(np.sqrt(dim - 1)))
    if side * side + 1 != dim:
        raise InvalidInput("dim must be a square plus one")
    grid = np.linspace(-1.2, 1.2, side)
    cx, cy = np.meshgrid(grid, grid, indexing="ij")
    rbf = np.exp(-((x[0] - cx.ravel()) ** 2 + (x[1] - cy.ravel()) ** 2) / (2 * 0.45 ** 2))
    vec = np.concatenate([rbf, [0.3 * x[2]]])
    return vec / np.linalg.norm(vec)


# --------------------------------------------------------------------------
# lexicon
# --------------------------------------------------------------------------


def corpus_words():
    words = set(WAKEWORD.split())
    for templates in INTENT_TEMPLATES.values():
        for t in templates:
            words.update(w for w in t.split() if not w.startswith("{"))
    for values in ENTITY_VALUES.values():
        words.update(values)
    return sorted(words)


def build_lexicon(seed=0):
    """Closed pseudo-word lexicon: each corpus word gets a unique CV(C) string."""
    rng = np.random.default_rng([int(seed), 7919])
    vocab = PhonemeVocabulary.build(list(PHONEMES), boundary=BOUNDARY)
    entries, used = {}, set()
    for word in corpus_words():
        while True:
            n_syll = 1 if len(word) <= 4 else 2
            phones = []
            for _ in range(n_syll):
                phones.append(str(rng.choice(CONSONANTS)))
                phones.append(str(rng.choice(VOWELS)))
            if rng.random() < 0.5:
                phones.append(str(rng.choice(CONSONANTS)))
            key = tuple(phones)
            if key not in used:
                used.add(key)
                entries[word] = phones
                break
    return Lexicon(entries, vocab, boundary=BOUNDARY)


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------


@dataclass
class Rendering:
    waveform: Waveform
    mel: MelSpectrogram
    durations: np.ndarray
    symbols: list


def _closed_symbols(text, lexicon):
    words = normalize_text(text).split()
    if not words:
        raise InvalidInput("empty transcript")
    for w in words:
        if w not in lexicon.entries:
            raise InvalidInput(f"word {w!r} not in the corpus lexicon")
    return lexicon.symbols(text)


def base_durations(symbols, profile, rng):
    d = np.empty(len(symbols), dtype=np.int64)
    for i, s in enumerate(symbols):
        if s == BOUNDARY:
            d[i] = PAUSE_FRAMES
        else:
            d[i] = max(2, int(round(PHONEMES[s][7] * profile.rate * rng.uniform(0.8, 1.25))))
    return d


def apply_timing(durations, symbols, transform):
    out = np.empty_like(durations)
    for i, (d, s) in enumerate(zip(durations, symbols)):
        scale = transform.time_stretch * (transform.pause_scale if s == BOUNDARY else 1.0)
        out[i] = max(1, int(round(d * scale)))
    return out


def _envelope(freqs, params, profile):
    """Harmonic amplitudes; ``freqs`` is (T, K), ``params`` per-frame (T, 4)."""
    env = np.full_like(freqs, 0.01)
    for j, (bw, g) in enumerate(zip(_BANDWIDTHS, _FORMANT_GAINS)):
        fc = params[:, j:j + 1] * profile.formant_scale
        env += g / (1.0 + ((freqs - fc) / bw) ** 2)
    tilt = _BASE_TILT_DB + profile.tilt + profile.transform.spectral_tilt
    octaves = np.log2(np.maximum(freqs, 60.0) / 500.0)
    return env * 10.0 ** ((params[:, 3:4] + tilt * octaves) / 20.0)


def render_utterance(text, profile, lexicon, cfg=None, seed=0, durations=None):
    """Render ``text`` for ``profile``.

    With ``durations`` given, timing is taken verbatim (the atypical
    time/pause stretch is not applied): this is the frame-synchronous
    oracle used to score conversions.
    """
    cfg = cfg or FeatureConfig()
    symbols = _closed_symbols(text, lexicon)
    rng = np.random.default_rng([int(seed), 104729])
    base = base_durations(symbols, profile, rng)
    if durations is None:
        durations = apply_timing(base, symbols, profile.transform)
    else:
        durations = np.asarray(durations, dtype=np.int64)
        if len(durations) != len(symbols) or np.any(durations < 1):
            raise InvalidInput("durations must be positive, one per phoneme")

    hop, sr = cfg.hop_samples, cfg.sample_rate
    n_frames = int(durations.sum())
    n_samples = n_frames * hop
    frame_phone = np.repeat(np.arange(len(symbols)), durations)

    # f0: declination plus smooth jitter (jitter noise is always drawn so the
    # rng stream does not depend on severity)
    knots = rng.standard_normal(n_frames // 4 + 2)
    jitter = np.interp(np.arange(n_frames) / 4.0, np.arange(len(knots)), knots)
    decl = np.linspace(0.06, -0.06, n_frames)
    f0_frames = profile.pitch * (1.0 + decl) * (1.0 + profile.transform.jitter_depth * jitter)
    f0 = np.interp(np.arange(n_samples), np.arange(n_frames) * hop + hop / 2, f0_frames)

    table = np.array([PHONEMES[p][:7] if p != BOUNDARY else (0,) * 7 for p in symbols], dtype=np.float64)
    frame_params = table[frame_phone]
    voiced = frame_params[:, 6] > 0
    n_harm = int(_MAX_HARMONIC_HZ // (f0_frames.min() * 0.9))
    freqs = np.arange(1, n_harm + 1)[None, :] * f0_frames[:, None]
    harm_amps = _envelope(freqs, frame_params[:, :4], profile)
    harm_amps[(freqs > _MAX_HARMONIC_HZ) | ~voiced[:, None]] = 0.0

    fft_freqs = np.linspace(0.0, sr / 2, cfg.n_freqs)[None, :]
    centre = np.maximum(frame_params[:, 5:6], 1.0)
    band = np.exp(-0.5 * ((fft_freqs - centre * profile.formant_scale) / (0.25 * centre)) ** 2)
    octaves = np.log2(np.maximum(fft_freqs, 60.0) / 500.0)
    noise_env = frame_params[:, 4:5] * band * 10.0 ** (profile.transform.spectral_tilt * octaves / 20.0)

    voiced_part = harmonic_stack(f0, harm_amps, hop, sr)
    phases = np.exp(2j * np.pi * rng.random(noise_env.shape))
    noise_part = istft(noise_env * phases * (cfg.n_fft / 8.0), cfg)
    floor = _NOISE_FLOOR * rng.standard_normal(n_samples)
    samples = np.clip(_OUTPUT_GAIN * (voiced_part + noise_part) + floor, -1.0, 1.0)

    wave = Waveform(samples, sr)
    mel = mel_spectrogram(wave, cfg)
    assert mel.n_frames == n_frames
    return Rendering(wave, mel, durations, symbols)


# --------------------------------------------------------------------------
# corpus generation
# --------------------------------------------------------------------------


@dataclass
class CorpusSpec:
    n_typical: int = 6
    n_atypical: int = 8
    utterances_per_speaker: int = 200
    seed: int = 0
    severities: tuple = ()  # optional explicit atypical severities
    name_prefix: str = ""

    def __post_init__(self):
        if self.n_typical < 0 or self.n_atypical < 0 or self.n_typical + self.n_atypical == 0:
            raise InvalidInput("need at least one speaker")
        if self.utterances_per_speaker <= 0:
            raise InvalidInput("utterances_per_speaker must be positive")
        if self.severities and len(self.severities) != self.n_atypical:
            raise InvalidInput("one severity per atypical speaker")


def atypical_severities(n, seed):
    """Alternate Low (<= 1.5) and High (> 1.5) severities."""
    rng = np.random.default_rng([int(seed), 31337])
    out = []
    for i in range(n):
        if i % 2 == 0:
            out.append(round(float(rng.uniform(0.4, 1.5)), 2))
        else:
            out.append(round(float(rng.uniform(2.0, 3.6)), 2))
    return out


def make_profiles(spec):
    pre = spec.name_prefix
    profiles = [make_profile(f"{pre}typ{i:02d}", spec.seed) for i in range(spec.n_typical)]
    sev = list(spec.severities) or atypical_severities(spec.n_atypical, spec.seed)
    profiles += [make_profile(f"{pre}aty{i:02d}", spec.seed, s) for i, s in enumerate(sev)]
    return profiles


def sample_sentence(rng):
    """Random (transcript, intent, entities) from the intent templates."""
    intents = sorted(INTENT_TEMPLATES)
    intent = intents[rng.integers(len(intents))]
    templates = INTENT_TEMPLATES[intent]
    template = templates[rng.integers(len(templates))]
    entities, fill = [], {}
    for slot, values in ENTITY_VALUES.items():
        if "{" + slot + "}" in template:
            fill[slot] = values[rng.integers(len(values))]
            entities.append((slot, fill[slot]))
    return f"{WAKEWORD} {template.format(**fill)}", intent, entities


def label_space():
    """Every intent and every (type, value) entity the templates can produce."""
    intents = sorted(INTENT_TEMPLATES)
    slots = {slot for ts in INTENT_TEMPLATES.values() for t in ts for slot in ENTITY_VALUES if "{" + slot + "}" in t}
    return intents, sorted((slot, v) for slot in slots for v in ENTITY_VALUES[slot])


@dataclass
class Corpus:
    """In-memory corpus: manifest records plus rendered mels and durations."""
    spec: CorpusSpec
    lexicon: Lexicon
    profiles: dict
    records: list
    mels: dict
    durations: dict
    cfg: FeatureConfig

    def by_speaker(self, speaker_id):
        return [r for r in self.records if r.speaker_id == speaker_id]

    def speakers(self, atypical=None):
        ids = sorted(self.profiles)
        if atypical is None:
            return ids
        return [s for s in ids if self.profiles[s].atypical == atypical]

    def render(self, record, profile=None, durations=None):
        return render_utterance(record.transcript, profile or self.profiles[record.speaker_id],
                                self.lexicon, self.cfg, record.seed, durations)


def generate_corpus(spec, out_dir=None, cfg=None, keep_audio=False):
    """Generate speakers, sentences and renderings.

    With ``out_dir`` set, WAVs, ``manifest.jsonl``, ``lexicon.txt`` and
    ``vocab.txt`` are written there.
    """
    cfg = cfg or FeatureConfig()
    lexicon = build_lexicon(spec.seed)
    profiles = {p.speaker_id: p for p in make_profiles(spec)}
    records, mels, durs = [], {}, {}
    if out_dir:
        os.makedirs(os.path.join(out_dir, "wav"), exist_ok=True)
    for sid in sorted(profiles):
        prof = profiles[sid]
        rng = _speaker_rng(sid, spec.seed + 1)
        for j in range(spec.utterances_per_speaker):
            text, intent, entities = sample_sentence(rng)
            utt_seed = int(rng.integers(2**31 - 1))
            uid = f"{sid}_{j:04d}"
            rend = render_utterance(text, prof, lexicon, cfg, utt_seed)
            path = f"wav/{uid}.wav"
            if out_dir:
                write_wav(os.path.join(out_dir, path), rend.waveform)
            records.append(UtteranceRecord(
                utterance_id=uid, audio_path=path, transcript=text, speaker_id=sid,
                intent=intent, entities=entities,
                severity=prof.severity if prof.atypical else None,
                origin="real", seed=utt_seed))
            mels[uid] = rend.mel.frames
            durs[uid] = rend.durations
    if out_dir:
        write_manifest(os.path.join(out_dir, "manifest.jsonl"), records)
        lexicon.save(os.path.join(out_dir, "lexicon.txt"))
        lexicon.vocab.save(os.path.join(out_dir, "vocab.txt"))
    return Corpus(spec, lexicon, profiles, records, mels, durs, cfg)


def save_corpus(corpus, out_dir):
    """Write manifest, lexicon, spec and a feature archive that ``load_corpus`` reads back."""
    os.makedirs(out_dir, exist_ok=True)
    write_manifest(os.path.join(out_dir, "manifest.jsonl"), corpus.records)
    corpus.lexicon.save(os.path.join(out_dir, "lexicon.txt"))
    corpus.lexicon.vocab.save(os.path.join(out_dir, "vocab.txt"))
    spec = {**corpus.spec.__dict__, "severities": list(corpus.spec.severities)}
    with open(os.path.join(out_dir, "corpus.json"), "w", encoding="utf-8") as fh:
        json.dump({"spec": spec, "features": corpus.cfg.to_dict()}, fh, sort_keys=True, indent=1)
    arrays = {f"mel/{r.utterance_id}": corpus.mels[r.utterance_id] for r in corpus.records}
    arrays.update({f"dur/{r.utterance_id}": corpus.durations[r.utterance_id] for r in corpus.records})
    with open(os.path.join(out_dir, "features.npz"), "wb") as fh:
        np.savez(fh, **arrays)


def load_corpus(path):
    """Inverse of ``save_corpus``; profiles and lexicon are regenerated from the stored spec."""
    meta_path = os.path.join(path, "corpus.json")
    if not os.path.exists(meta_path):
        raise InvalidInput(f"{path} is not a corpus directory (no corpus.json)")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    spec = CorpusSpec(**{**meta["spec"], "severities": tuple(meta["spec"]["severities"])})
    lexicon = build_lexicon(spec.seed)
    profiles = {p.speaker_id: p for p in make_profiles(spec)}
    records = read_manifest(os.path.join(path, "manifest.jsonl"))
    with np.load(os.path.join(path, "features.npz")) as z:
        mels = {r.utterance_id: z[f"mel/{r.utterance_id}"] for r in records}
        durs = {r.utterance_id: z[f"dur/{r.utterance_id}"] for r in records}
    return Corpus(spec, lexicon, profiles, records, mels, durs, FeatureConfig(**meta["features"]))
