"""End-to-end pipelines on the synthetic corpus.

Two corpora are used: a many-speaker typical corpus that plays the role
of the VC pre-training / source-audio set, and the main corpus of
typical and atypical speakers with intent and entity labels.
"""
import copy
import logging
from dataclasses import asdict, dataclass

import numpy as np

from .augment import augment_utterance
from .aty import build_finetune_plan, finetune_aty
from .corpus import (AVERAGE_PROFILE, CorpusSpec, generate_corpus, label_space, sample_sentence,
                     timbre_embedding)
from .errors import InvalidInput
from .slu import PredictionRow, SluConfig, SluExample, assign_group, make_cv_splits, predict, train_slu
from .tts import TtsModel, align_train, encode, make_example, synthesize, teacher_forced_mel, train_tts
from .vc import SpeakerEmbedding, VcExample, VcModel, finetune_atypical_decoder, train_vc

log = logging.getLogger(__name__)


@dataclass
class Scale:
    """Every size knob of the experiments in one place."""
    # corpora
    main_typical: int = 6
    main_atypical: int = 8
    main_utterances: int = 200
    source_speakers: int = 60
    source_utterances: int = 16
    seed: int = 0
    # pre-training
    tts_speaker: str = "typ00"
    tts_train_utterances: int = 180
    tts_epochs: int = 120
    tts_lr: float = 2e-3
    vc_epochs: int = 15
    vc_lr: float = 2e-3
    # per-speaker adaptation
    real_utterances: int = 20
    heldout_utterances: int = 40
    vc_finetune_epochs: int = 30
    aux_hours: float = 0.2
    aty_epochs: int = 50
    aty_lr: float = 1e-3
    batch_size: int = 16

    def to_dict(self):
        return asdict(self)


def speaker_embedding(profile):
    return SpeakerEmbedding(timbre_embedding(profile), profile.speaker_id)


# --------------------------------------------------------------------------
# corpora and pre-training
# --------------------------------------------------------------------------


def main_corpus(scale, out_dir=None):
    spec = CorpusSpec(scale.main_typical, scale.main_atypical, scale.main_utterances, scale.seed)
    return generate_corpus(spec, out_dir)


def source_corpus(scale, out_dir=None):
    spec = CorpusSpec(scale.source_speakers, 0, scale.source_utterances, scale.seed + 7, name_prefix="src")
    return generate_corpus(spec, out_dir)


def vc_examples(corpus):
    """Pair every utterance with its average-voice rendering (same durations and seed)."""
    out = []
    for r in corpus.records:
        avg = corpus.render(r, AVERAGE_PROFILE, corpus.durations[r.utterance_id]).mel.frames
        out.append(VcExample(corpus.mels[r.utterance_id], speaker_embedding(corpus.profiles[r.speaker_id]).vector,
                             avg, r.utterance_id))
    return out


def pretrain_tts(corpus, scale, log_rows=None):
    recs = corpus.by_speaker(scale.tts_speaker)[:scale.tts_train_utterances]
    model = TtsModel.create(corpus.lexicon.vocab, [scale.tts_speaker], seed=scale.seed, feature_config=corpus.cfg)
    examples = [make_example(r, corpus.mels[r.utterance_id], corpus.lexicon) for r in recs]
    return train_tts(model, examples, scale.tts_epochs, scale.batch_size, scale.tts_lr, scale.seed, log_rows)


def pretrain_vc(source, scale, log_rows=None):
    model = VcModel.create(seed=scale.seed)
    return train_vc(model, vc_examples(source), scale.vc_epochs, scale.batch_size, scale.vc_lr, scale.seed, log_rows)


# --------------------------------------------------------------------------
# per-speaker adaptation
# --------------------------------------------------------------------------


def split_speaker(corpus, speaker, n_real, n_heldout, seed):
    """Disjoint (real-train, held-out) record lists for one speaker."""
    recs = corpus.by_speaker(speaker)
    if n_real + n_heldout > len(recs):
        raise InvalidInput(f"{speaker} has only {len(recs)} utterances")
    order = np.random.default_rng([seed, 99]).permutation(len(recs))
    return [recs[i] for i in order[:n_real]], [recs[i] for i in order[n_real:n_real + n_heldout]]


def adapt_vc(vc, corpus, speaker, real_records, scale, seed):
    emb = speaker_embedding(corpus.profiles[speaker])
    data = [(corpus.mels[r.utterance_id], emb) for r in real_records]
    return finetune_atypical_decoder(vc, data, scale.vc_finetune_epochs, 8, 5e-4, seed)


def source_stream(source, seed):
    order = np.random.default_rng([seed, 5]).permutation(len(source.records))
    for i in order:
        r = source.records[i]
        yield r.utterance_id, source.mels[r.utterance_id]


def heldout_error(model, corpus, records, speaker):
    """Mean decoder MSE against the real mels, using MAS durations from the model's own encoder."""
    errs = []
    for r in records:
        ex = make_example(r, corpus.mels[r.utterance_id], corpus.lexicon, speaker)
        d = align_train(encode(ex.ids, model), ex.mel)
        errs.append(float(np.mean((teacher_forced_mel(model, ex, d, speaker) - ex.mel) ** 2)))
    return float(np.mean(errs))


def make_aty_model(base, speaker, init_from):
    model = copy.deepcopy(base)
    model.add_speaker(speaker, init_from=init_from)
    return model


def speaker_plan(vc, corpus, source, speaker, real, scale, seed, crop_frames):
    """Adapt g^a to ``speaker`` and generate its auxiliary triples."""
    vc_spk = adapt_vc(vc, corpus, speaker, real, scale, seed)
    return build_finetune_plan(speaker, vc_spk, source_stream(source, seed), scale.aux_hours,
                               speaker_embedding(corpus.profiles[speaker]), corpus.cfg.frame_hop_ms, crop_frames, seed)


def finetune_speaker(init, corpus, speaker, real, plan, scale, seed, lambda_aux=1.0, log_rows=None):
    model = copy.deepcopy(init)
    examples = [make_example(r, corpus.mels[r.utterance_id], corpus.lexicon, speaker) for r in real]
    return finetune_aty(model, examples, speaker, plan, scale.aty_epochs, scale.batch_size, scale.aty_lr, seed,
                        lambda_aux, lambda_aux, log_rows)


@dataclass
class AbResult:
    seed: int
    speaker: str
    severity: float
    with_aux: float
    without_aux: float
    before: float
    n_triples: int

    @property
    def aux_wins(self):
        return self.with_aux < self.without_aux


def ab_seed(base_tts, vc, corpus, source, speaker, scale, seed, log_rows=None):
    """Fine-tune one atypical speaker twice (with and without SCM+ACM) from identical init."""
    real, held = split_speaker(corpus, speaker, scale.real_utterances, scale.heldout_utterances, seed)
    init = make_aty_model(base_tts, speaker, scale.tts_speaker)
    plan = speaker_plan(vc, corpus, source, speaker, real, scale, seed, init.hp.crop_frames)
    before = heldout_error(init, corpus, held, speaker)
    scores = {}
    for arm, lam in (("with", 1.0), ("without", 0.0)):
        rows = [] if log_rows is not None else None
        model = finetune_speaker(init, corpus, speaker, real, plan, scale, seed, lam, rows)
        if log_rows is not None:
            log_rows.extend({"arm": arm, "seed": seed, **row} for row in rows)
        scores[arm] = heldout_error(model, corpus, held, speaker)
    return AbResult(seed, speaker, corpus.profiles[speaker].severity, scores["with"], scores["without"], before,
                    len(plan.triples))


# --------------------------------------------------------------------------
# SLU augmentation experiment
# --------------------------------------------------------------------------


def slu_example(record, mel, origin="real"):
    return SluExample(mel, record.intent, tuple(record.entities), record.speaker_id, record.severity, origin,
                      record.utterance_id)


def synthesize_speaker_data(model, corpus, speaker, hours, seed):
    """Aty-TTS utterances of freshly sampled commands, ``hours`` of audio in total."""
    rng = np.random.default_rng([seed, 17, int.from_bytes(speaker.encode(), "little") % (2 ** 31)])
    severity = corpus.profiles[speaker].severity
    out, seconds = [], 0.0
    while seconds < hours * 3600:
        text, intent, entities = sample_sentence(rng)
        mel, _ = synthesize(text, model, corpus.lexicon, speaker, gl_iters=None)
        out.append(SluExample(mel.frames, intent, tuple(entities), speaker, severity, "tts",
                              f"{speaker}_tts{len(out):05d}"))
        seconds += mel.n_frames * corpus.cfg.frame_hop_ms / 1000
    return out


def take_hours(examples, hours, frame_hop_ms):
    """Shortest prefix of ``examples`` reaching ``hours`` of audio."""
    out, seconds = [], 0.0
    for ex in examples:
        if seconds >= hours * 3600:
            break
        out.append(ex)
        seconds += ex.mel.shape[0] * frame_hop_ms / 1000
    return out


def child_seed(*keys):
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def wave_spec_examples(corpus, records, policy, copies):
    """``copies`` WaveAug+SpecAug variants of every record, each with its own seed."""
    out = []
    for r in records:
        wave = corpus.render(r).waveform
        for c in range(copies):
            mel = augment_utterance(wave, policy.with_seed(child_seed(policy.seed, r.seed, c)), corpus.cfg)
            out.append(SluExample(mel.frames, r.intent, tuple(r.entities), r.speaker_id, r.severity, "augmented",
                                  f"{r.utterance_id}_aug{c}"))
    return out


@dataclass
class SluPlan:
    """Material shared by all SLU arms, keyed by atypical speaker."""
    real: dict
    synthetic: dict
    augmented: dict


def run_slu_fold(corpus, plan, train_speakers, test_speakers, methods, hours_grid, cfg, seed, fold,
                 typical_utterances=None, log_rows=None):
    """Train one SLU model per (method, hours) on a fold and predict the test speakers."""
    base = []
    for spk in corpus.speakers(atypical=False):
        base += [slu_example(r, corpus.mels[r.utterance_id]) for r in corpus.by_speaker(spk)[:typical_utterances]]
    for spk in train_speakers:
        base += [slu_example(r, corpus.mels[r.utterance_id]) for r in plan.real[spk]]
    test = [slu_example(r, corpus.mels[r.utterance_id]) for spk in test_speakers for r in corpus.by_speaker(spk)]
    intents, entities = label_space()
    arms = []
    for method in methods:
        arms += [(method, float(h)) for h in hours_grid] if method == "aty-tts" else [(method, 0.0)]
    rows, done = [], {}
    for method, hours in arms:
        extra = []
        if method == "wave+spec":
            extra = [ex for spk in train_speakers for ex in plan.augmented.get(spk, [])]
        elif method == "aty-tts":
            extra = [ex for spk in train_speakers
                     for ex in take_hours(plan.synthetic.get(spk, []), hours, corpus.cfg.frame_hop_ms)]
        key = tuple(ex.utterance_id for ex in extra)
        if key not in done:
            model = train_slu(base + extra, SluConfig(**{**asdict(cfg), "seed": seed}), intents, entities)
            done[key] = predict(model, test)
        for ex, (intent, ents) in zip(test, done[key]):
            rows.append(PredictionRow(method, hours, seed, fold, ex.utterance_id, ex.speaker_id,
                                      assign_group(ex.severity).group, ex.intent, intent,
                                      tuple(sorted(ex.entities)), tuple(sorted(ents))))
        if log_rows is not None:
            log_rows.append({"seed": seed, "fold": fold, "method": method, "hours": hours,
                             "train_size": len(base) + len(extra)})
    return rows


# --------------------------------------------------------------------------
# drivers
# --------------------------------------------------------------------------


@dataclass
class Pretrained:
    corpus: object
    source: object
    tts: object
    vc: object


def pretrain_all(scale):
    """Main and source corpora plus the pre-trained TTS and VC models."""
    corpus, source = main_corpus(scale), source_corpus(scale)
    return Pretrained(corpus, source, pretrain_tts(corpus, scale), pretrain_vc(source, scale))


def run_ab(pre, scale, seeds):
    """A/B for each seed, cycling through the atypical speakers."""
    speakers = pre.corpus.speakers(atypical=True)
    out = []
    for k, seed in enumerate(seeds):
        res = ab_seed(pre.tts, pre.vc, pre.corpus, pre.source, speakers[k % len(speakers)], scale, seed)
        log.info("ab seed=%d speaker=%s with=%.4f without=%.4f", seed, res.speaker, res.with_aux, res.without_aux)
        out.append(res)
    return out


def build_slu_plan(pre, scale, max_hours, policy, copies, seed=0):
    """Per atypical speaker: real subset, Aty-TTS data (``max_hours``) and WaveAug+SpecAug copies."""
    real, synthetic, augmented = {}, {}, {}
    for spk in pre.corpus.speakers(atypical=True):
        real[spk] = split_speaker(pre.corpus, spk, scale.real_utterances, 0, seed)[0]
        init = make_aty_model(pre.tts, spk, scale.tts_speaker)
        aux = speaker_plan(pre.vc, pre.corpus, pre.source, spk, real[spk], scale, seed, init.hp.crop_frames)
        model = finetune_speaker(init, pre.corpus, spk, real[spk], aux, scale, seed)
        synthetic[spk] = synthesize_speaker_data(model, pre.corpus, spk, max_hours, seed)
        augmented[spk] = wave_spec_examples(pre.corpus, real[spk], policy, copies)
        log.info("slu plan speaker=%s synthetic=%d augmented=%d", spk, len(synthetic[spk]), len(augmented[spk]))
    return SluPlan(real, synthetic, augmented)


def run_slu_experiment(corpus, plan, cfg, seeds, hours_grid, folds=2,
                       methods=("none", "wave+spec", "aty-tts")):
    """Cross-validated SLU comparison over atypical speakers; returns all prediction rows."""
    rows = []
    for seed in seeds:
        for fold, (train, test) in enumerate(make_cv_splits(corpus.speakers(atypical=True), folds, seed)):
            rows += run_slu_fold(corpus, plan, train, test, list(methods), hours_grid, cfg, seed, fold)
        log.info("slu seed=%d done", seed)
    return rows
