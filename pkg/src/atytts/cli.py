"""Command-line entry point.

Every command writes into its own run directory (``--out``): the config
snapshot (``config.yaml``), ``run.json`` with the config digest, a
``key=value`` log (``log.txt``) and ``metrics.csv``.  Training commands
checkpoint every ``checkpoint_every`` steps (rounded up to whole epochs)
and resume from the last checkpoint when re-run into the same directory.
"""
import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from collections import defaultdict

import numpy as np

from . import __version__
from .audio import MelSpectrogram, griffin_lim, load_mel, save_mel, write_wav
from .aty import build_finetune_plan, finetune_aty
from .config import RunConfig, load_config, save_config
from .corpus import label_space, load_corpus, save_corpus
from .errors import InvalidInput, NumericalError
from .experiments import (SluPlan, adapt_vc, child_seed, heldout_error, main_corpus, make_aty_model, run_slu_fold,
                          slu_example, source_corpus, source_stream, speaker_embedding, split_speaker,
                          synthesize_speaker_data, take_hours, vc_examples, wave_spec_examples)
from .manifest import UtteranceRecord, read_manifest, write_manifest
from .slu import (PredictionRow, SluConfig, SluExample, assign_group, load_slu, make_cv_splits, predict,
                  read_score_table, report_tables, save_slu, subjective_stats, summarize, train_slu)
from .tts import TtsModel, load_tts, make_example, save_tts, synthesize, train_tts
from .vc import VcModel, load_vc, save_vc, train_vc, write_triples

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

log = logging.getLogger("atytts")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _quote(v):
    s = str(v)
    return json.dumps(s) if (not s or any(c in s for c in " =\"")) else s


class KeyValueFormatter(logging.Formatter):
    def format(self, record):
        fields = {"ts": f"{record.created:.3f}", "level": record.levelname.lower(), "event": record.getMessage()}
        fields.update(getattr(record, "kv", {}))
        return " ".join(f"{k}={_quote(v)}" for k, v in fields.items())


class Run:
    """A run directory: config snapshot, log file and metric rows."""

    def __init__(self, out, cfg, command, argv):
        os.makedirs(out, exist_ok=True)
        self.dir, self.cfg, self.command = out, cfg, command
        snapshot = self.path("config.yaml")
        if os.path.exists(snapshot) and load_config(snapshot).digest() != cfg.digest():
            raise InvalidInput(f"{out} already holds a run with a different config; use a fresh --out")
        save_config(snapshot, cfg)
        with open(self.path("run.json"), "w", encoding="utf-8") as fh:
            json.dump({"command": command, "argv": list(argv), "config_digest": cfg.digest(),
                       "version": __version__}, fh, indent=1, sort_keys=True)
        self.handler = logging.FileHandler(self.path("log.txt"), encoding="utf-8")
        self.handler.setFormatter(KeyValueFormatter())
        log.addHandler(self.handler)
        log.setLevel(logging.INFO)
        self.rows = []

    def path(self, *parts):
        return os.path.join(self.dir, *parts)

    def log(self, event, **kv):
        log.info(event, extra={"kv": {"command": self.command, **kv}})

    def metric(self, **row):
        self.rows.append({"config_digest": self.cfg.digest(), **row})

    def close(self, code):
        columns = []
        for row in self.rows:
            columns += [k for k in row if k not in columns]
        with open(self.path("metrics.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, columns, lineterminator="\n")
            w.writeheader()
            for row in self.rows:
                w.writerow({k: _fmt(row.get(k, "")) for k in columns})
        self.log("exit", code=code)
        log.removeHandler(self.handler)
        self.handler.close()


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def _write_json(path, obj):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True)
    os.replace(tmp, path)


def resumable(run, name, model, epochs, steps_per_epoch, fit, save, load):
    """Train in chunks of whole epochs, checkpointing after each chunk.

    ``fit(model, n_epochs, chunk_index)`` trains one chunk.  Chunk seeds
    depend only on the chunk index, so an interrupted and resumed run
    ends bit-identical to an uninterrupted one.
    """
    per = max(1, math.ceil(run.cfg.checkpoint_every / max(1, steps_per_epoch)))
    state, ckpt = run.path(f"{name}.resume.json"), run.path(f"{name}.partial.pt")
    done = 0
    if os.path.exists(state):
        with open(state, encoding="utf-8") as fh:
            done = json.load(fh)["epochs_done"]
        model = load(ckpt)
        run.log("resume", stage=name, epochs_done=done)
    while done < epochs:
        n = min(per, epochs - done)
        model = fit(model, n, done // per)
        done += n
        save(ckpt, model)
        _write_json(state, {"epochs_done": done, "epochs": epochs})
        run.log("checkpoint", stage=name, epochs_done=done, steps=done * steps_per_epoch)
    return model


def _mean_rows(rows, keys):
    return {f"loss_{k}": float(np.mean([r[k] for r in rows])) for k in keys if rows and k in rows[0]}


# --------------------------------------------------------------------------
# feature sets (synthetic / augmented utterances stored as mel containers)
# --------------------------------------------------------------------------


def write_feature_set(out_dir, examples, frame_hop_ms):
    os.makedirs(os.path.join(out_dir, "mel"), exist_ok=True)
    records = []
    for ex in examples:
        rel = f"mel/{ex.utterance_id}.mel"
        save_mel(os.path.join(out_dir, rel), MelSpectrogram(ex.mel, frame_hop_ms))
        records.append(UtteranceRecord(ex.utterance_id, rel, "", ex.speaker_id, ex.intent, list(ex.entities),
                                       ex.severity, ex.origin))
    write_manifest(os.path.join(out_dir, "manifest.jsonl"), records)


def read_feature_set(path):
    path = _resolve(path, "manifest.jsonl", ("synthetic", "augmented"))
    return [SluExample(load_mel(os.path.join(path, r.audio_path)).frames, r.intent, tuple(r.entities), r.speaker_id,
                       r.severity, r.origin, r.utterance_id)
            for r in read_manifest(os.path.join(path, "manifest.jsonl"))]


def _resolve(path, marker, subdirs):
    """Accept either a data directory or a run directory containing one."""
    if os.path.exists(os.path.join(path, marker)):
        return path
    for sub in subdirs:
        if os.path.exists(os.path.join(path, sub, marker)):
            return os.path.join(path, sub)
    raise InvalidInput(f"{path}: no {marker} found")


def _corpus(path):
    return load_corpus(_resolve(path, "corpus.json", ("data",)))


def _checkpoint(path, name):
    if os.path.isdir(path):
        path = os.path.join(path, name)
    if not os.path.exists(path):
        raise InvalidInput(f"checkpoint {path} not found")
    return path


def _by_speaker(examples):
    out = defaultdict(list)
    for ex in examples:
        out[ex.speaker_id].append(ex)
    return out


def _real_subset(corpus, speaker, cfg):
    return split_speaker(corpus, speaker, cfg.scale.real_utterances, 0, cfg.seeds[0])[0]


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_corpus(args, run):
    make = source_corpus if args.kind == "source" else main_corpus
    data = run.path("data")
    corpus = make(run.cfg.scale, data)
    save_corpus(corpus, data)
    with open(os.path.join(data, "manifest.jsonl"), "rb") as fh:
        digest = _sha256(fh.read())
    run.log("corpus", kind=args.kind, utterances=len(corpus.records), manifest_sha256=digest)
    run.metric(kind=args.kind, speakers=len(corpus.profiles), utterances=len(corpus.records), manifest_sha256=digest)


def _sha256(blob):
    return hashlib.sha256(blob).hexdigest()


def cmd_pretrain_tts(args, run):
    corpus, sc = _corpus(args.corpus), run.cfg.scale
    recs = corpus.by_speaker(sc.tts_speaker)[:sc.tts_train_utterances]
    if not recs:
        raise InvalidInput(f"speaker {sc.tts_speaker!r} not in corpus")
    examples = [make_example(r, corpus.mels[r.utterance_id], corpus.lexicon) for r in recs]
    model = TtsModel.create(corpus.lexicon.vocab, [sc.tts_speaker], seed=sc.seed, feature_config=corpus.cfg)
    rows = []

    def fit(m, n, chunk):
        return train_tts(m, examples, n, sc.batch_size, sc.tts_lr, child_seed(sc.seed, chunk), rows)

    model = resumable(run, "tts", model, sc.tts_epochs, -(-len(examples) // sc.batch_size), fit, save_tts, load_tts)
    save_tts(run.path("tts.pt"), model)
    run.metric(stage="pretrain_tts", utterances=len(examples), **_mean_rows(rows[-len(examples):],
                                                                            ("encoder", "duration", "decoder")))


def cmd_train_vc(args, run):
    source, sc = _corpus(args.corpus), run.cfg.scale
    examples = vc_examples(source)
    model = VcModel.create(seed=sc.seed)
    rows = []

    def fit(m, n, chunk):
        return train_vc(m, examples, n, sc.batch_size, sc.vc_lr, child_seed(sc.seed, chunk), rows)

    model = resumable(run, "vc", model, sc.vc_epochs, -(-len(examples) // sc.batch_size), fit, save_vc, load_vc)
    save_vc(run.path("vc.pt"), model)
    run.metric(stage="train_vc", utterances=len(examples), **_mean_rows(rows[-10:], ("encoder", "decoder")))


def cmd_finetune_aty(args, run):
    cfg = run.cfg
    a, sc, seed = cfg.aty, cfg.scale, cfg.seeds[0]
    speaker = args.speaker or a.speaker_id
    if not speaker:
        raise InvalidInput("no speaker given (--speaker or aty.speaker_id)")
    corpus, source = _corpus(args.corpus), _corpus(args.source)
    if speaker not in corpus.profiles:
        raise InvalidInput(f"speaker {speaker!r} not in corpus")
    tts = load_tts(_checkpoint(args.tts or a.tts_checkpoint, "tts.pt"))
    vc = load_vc(_checkpoint(args.vc or a.vc_checkpoint, "vc.pt"))
    real, held = split_speaker(corpus, speaker, sc.real_utterances, sc.heldout_utterances, seed)
    vc_spk = adapt_vc(vc, corpus, speaker, real, sc, seed)
    plan = build_finetune_plan(speaker, vc_spk, source_stream(source, seed), a.hours_aux,
                               speaker_embedding(corpus.profiles[speaker]), corpus.cfg.frame_hop_ms, a.crop_frames,
                               seed)
    if plan.triples:
        write_triples(run.path("triples"), _TripleView(plan), corpus.cfg.frame_hop_ms)
    model = make_aty_model(tts, speaker, sc.tts_speaker if sc.tts_speaker in tts.speakers else None)
    before = heldout_error(model, corpus, held, speaker) if held else float("nan")
    examples = [make_example(r, corpus.mels[r.utterance_id], corpus.lexicon, speaker) for r in real]
    rows = []

    def fit(m, n, chunk):
        return finetune_aty(m, examples, speaker, plan, n, a.batch_size, a.lr, child_seed(seed, chunk),
                            a.lambda_speaker, a.lambda_atypical, rows)

    model = resumable(run, "aty", model, a.epochs, -(-len(examples) // a.batch_size), fit, save_tts, load_tts)
    save_tts(run.path("aty.pt"), model)
    after = heldout_error(model, corpus, held, speaker) if held else float("nan")
    run.log("finetuned", speaker=speaker, triples=len(plan.triples), heldout_before=before, heldout_after=after)
    run.metric(speaker=speaker, triples=len(plan.triples), heldout_before=before, heldout_after=after,
               **_mean_rows(rows[-len(examples):], ("decoder", "speaker", "atypical")))


class _TripleView:
    """Adapter exposing a plan's triples with the fields ``write_triples`` expects."""

    def __init__(self, plan):
        self.triples = plan.triples
        self.provenance = plan.manifest or [
            {"triple_id": t.triple_id, "source_id": t.source_utterance_id, "speaker_id": t.speaker_id,
             "seed": plan.seed} for t in plan.triples]


def cmd_synthesize(args, run):
    corpus = _corpus(args.corpus)
    model = load_tts(_checkpoint(args.tts, "aty.pt"))
    speaker = args.speaker
    if speaker not in model.speakers:
        raise InvalidInput(f"speaker {speaker!r} not in checkpoint (has {model.speakers})")
    severity = corpus.profiles[speaker].severity if speaker in corpus.profiles else None
    seed = run.cfg.seeds[0]
    if args.text:
        examples = []
        for k, text in enumerate(args.text):
            mel, _ = synthesize(text, model, corpus.lexicon, speaker, gl_iters=None)
            examples.append(SluExample(mel.frames, "", (), speaker, severity, "tts", f"{speaker}_text{k:04d}"))
    else:
        examples = synthesize_speaker_data(model, corpus, speaker, args.hours, seed)
    out = run.path("synthetic")
    write_feature_set(out, examples, corpus.cfg.frame_hop_ms)
    if args.gl_iters > 0:
        os.makedirs(os.path.join(out, "wav"), exist_ok=True)
        for ex in examples:
            wave = griffin_lim(MelSpectrogram(ex.mel, corpus.cfg.frame_hop_ms), corpus.cfg, args.gl_iters, seed)
            write_wav(os.path.join(out, "wav", f"{ex.utterance_id}.wav"), wave)
    seconds = sum(ex.mel.shape[0] for ex in examples) * corpus.cfg.frame_hop_ms / 1000
    run.metric(speaker=speaker, utterances=len(examples), seconds=seconds)


def cmd_augment(args, run):
    corpus = _corpus(args.corpus)
    speakers = args.speakers or corpus.speakers(atypical=True)
    examples = []
    for spk in speakers:
        if spk not in corpus.profiles:
            raise InvalidInput(f"speaker {spk!r} not in corpus")
        examples += wave_spec_examples(corpus, _real_subset(corpus, spk, run.cfg), run.cfg.augment, args.copies)
    write_feature_set(run.path("augmented"), examples, corpus.cfg.frame_hop_ms)
    run.metric(speakers=len(speakers), utterances=len(examples), copies=args.copies)


def _slu_train_set(corpus, cfg, speakers, extra_dirs, hours):
    train = [slu_example(r, corpus.mels[r.utterance_id]) for s in corpus.speakers(atypical=False)
             for r in corpus.by_speaker(s)]
    for spk in speakers:
        train += [slu_example(r, corpus.mels[r.utterance_id]) for r in _real_subset(corpus, spk, cfg)]
    for d in extra_dirs:
        groups = _by_speaker(read_feature_set(d))
        for spk in speakers:
            items = groups.get(spk, [])
            train += take_hours(items, hours, corpus.cfg.frame_hop_ms) if hours is not None else items
    return train


def cmd_train_slu(args, run):
    corpus, cfg = _corpus(args.corpus), run.cfg
    speakers = args.train_speakers if args.train_speakers is not None else corpus.speakers(atypical=True)
    train = _slu_train_set(corpus, cfg, speakers, args.extra, args.hours)
    intents, entities = label_space()
    base = cfg.slu
    rows = []

    def fit(m, n, chunk):
        chunk_cfg = SluConfig(**{**base.__dict__, "epochs": n, "seed": child_seed(base.seed, chunk)})
        return train_slu(train, chunk_cfg, intents, entities, rows, model=m)

    model = resumable(run, "slu", None, base.epochs, -(-len(train) // base.batch_size), fit, save_slu, load_slu)
    save_slu(run.path("slu.pt"), model)
    run.metric(train_utterances=len(train), final_loss=rows[-1]["loss"])


def _prediction_rows(model, test, method, hours, seed, fold):
    rows = []
    for ex, (intent, ents) in zip(test, predict(model, test)):
        group = assign_group(ex.severity).group if ex.severity is not None else "Typical"
        rows.append(PredictionRow(method, hours, seed, fold, ex.utterance_id, ex.speaker_id, group, ex.intent,
                                  intent, tuple(sorted(ex.entities)), tuple(sorted(ents))))
    return rows


def _summary_metrics(run, rows):
    for cell in summarize(rows):
        run.metric(**cell)


def cmd_evaluate(args, run):
    corpus = _corpus(args.corpus)
    model = load_slu(_checkpoint(args.slu, "slu.pt"))
    missing = [s for s in args.test_speakers if s not in corpus.profiles]
    if missing:
        raise InvalidInput(f"unknown test speakers {missing}")
    test = [slu_example(r, corpus.mels[r.utterance_id]) for s in args.test_speakers for r in corpus.by_speaker(s)]
    rows = _prediction_rows(model, test, args.method, args.hours, run.cfg.slu.seed, 0)
    report_tables(rows, run.path("report"))
    _summary_metrics(run, rows)


def cmd_sweep(args, run):
    corpus, cfg = _corpus(args.corpus), run.cfg
    aty = corpus.speakers(atypical=True)
    synthetic = _by_speaker([ex for d in args.synthetic for ex in read_feature_set(d)])
    augmented = _by_speaker([ex for d in args.augmented for ex in read_feature_set(d)])
    plan = SluPlan({s: _real_subset(corpus, s, cfg) for s in aty}, synthetic, augmented)
    methods = ["none"] + (["wave+spec"] if args.augmented else []) + ["aty-tts"]
    os.makedirs(run.path("partial"), exist_ok=True)
    rows = []
    for seed in cfg.seeds:
        for fold, (train, test) in enumerate(make_cv_splits(aty, args.folds, seed)):
            part = run.path("partial", f"seed{seed}_fold{fold}.json")
            if os.path.exists(part):
                with open(part, encoding="utf-8") as fh:
                    rows += [PredictionRow(**{**r, "gold_entities": _tuples(r["gold_entities"]),
                                              "pred_entities": _tuples(r["pred_entities"])}) for r in json.load(fh)]
                run.log("resume", seed=seed, fold=fold)
                continue
            got = run_slu_fold(corpus, plan, train, test, methods, cfg.sweep_hours, cfg.slu, seed, fold)
            _write_json(part, [r.__dict__ for r in got])
            run.log("fold", seed=seed, fold=fold, rows=len(got))
            rows += got
    files = report_tables(rows, run.path("report"))
    run.log("report", files=",".join(sorted(files)))
    _summary_metrics(run, rows)


def _tuples(items):
    return tuple(tuple(e) for e in items)


def cmd_subjective(args, run):
    table = read_score_table(args.scores)
    traits = args.trait or sorted({row.trait for row in table})
    for trait in traits:
        s = subjective_stats(table, trait)
        run.metric(trait=trait, n=s.n, mae=s.mae, rmse=s.rmse, r2=s.r2, diagnostic=s.diagnostic or "")


COMMANDS = {
    "corpus": cmd_corpus, "pretrain-tts": cmd_pretrain_tts, "train-vc": cmd_train_vc,
    "finetune-aty": cmd_finetune_aty, "synthesize": cmd_synthesize, "augment": cmd_augment,
    "train-slu": cmd_train_slu, "evaluate": cmd_evaluate, "sweep": cmd_sweep, "subjective": cmd_subjective,
}


def build_parser():
    parser = _Parser(prog="atytts", description="Atypical-speech TTS augmentation toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
        return p

    p = add("corpus", "generate a synthetic corpus")
    p.add_argument("--kind", choices=("main", "source"), default="main")
    p = add("pretrain-tts", "train the base TTS model on a typical speaker")
    p.add_argument("--corpus", required=True)
    p = add("train-vc", "train the VC model on the source corpus")
    p.add_argument("--corpus", required=True)
    p = add("finetune-aty", "adapt the TTS model to one atypical speaker")
    p.add_argument("--corpus", required=True)
    p.add_argument("--source", required=True, help="source corpus for auxiliary triples")
    p.add_argument("--tts")
    p.add_argument("--vc")
    p.add_argument("--speaker")
    p = add("synthesize", "synthesize utterances for one speaker")
    p.add_argument("--corpus", required=True)
    p.add_argument("--tts", required=True)
    p.add_argument("--speaker", required=True)
    p.add_argument("--hours", type=float, default=0.05)
    p.add_argument("--text", action="append")
    p.add_argument("--gl-iters", type=int, default=0, help="Griffin-Lim iterations for WAV output (0: mels only)")
    p = add("augment", "WaveAug+SpecAug copies of the real atypical subset")
    p.add_argument("--corpus", required=True)
    p.add_argument("--speakers", nargs="*")
    p.add_argument("--copies", type=int, default=5)
    p = add("train-slu", "train the SLU classifier")
    p.add_argument("--corpus", required=True)
    p.add_argument("--train-speakers", nargs="*", help="atypical speakers whose data is used (default: all)")
    p.add_argument("--extra", nargs="*", default=[], help="synthetic or augmented feature sets")
    p.add_argument("--hours", type=float, help="cap extra data per speaker")
    p = add("evaluate", "score an SLU model on held-out speakers")
    p.add_argument("--corpus", required=True)
    p.add_argument("--slu", required=True)
    p.add_argument("--test-speakers", nargs="+", required=True)
    p.add_argument("--method", default="model")
    p.add_argument("--hours", type=float, default=0.0)
    p = add("sweep", "cross-validated SLU experiment over the synthesized-hours grid")
    p.add_argument("--corpus", required=True)
    p.add_argument("--synthetic", nargs="+", required=True)
    p.add_argument("--augmented", nargs="*", default=[])
    p.add_argument("--folds", type=int, default=2)
    p = add("subjective", "MAE/RMSE/R2 between real and synthetic rating tables")
    p.add_argument("--scores", required=True)
    p.add_argument("--trait", action="append")
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = cfg.override(args.set)
    except UsageError as exc:
        print(f"error=usage message={_quote(exc)}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidInput, OSError) as exc:
        print(f"error=usage message={_quote(exc)}", file=sys.stderr)
        return EXIT_USAGE
    run = None
    try:
        run = Run(args.out, cfg, args.command, argv)
        run.log("start", config_digest=cfg.digest())
        COMMANDS[args.command](args, run)
        code = EXIT_OK
    except NumericalError as exc:
        code, kind, msg = EXIT_NUMERICAL, "numerical", exc
    except (InvalidInput, ValueError, KeyError, OSError) as exc:
        code, kind, msg = EXIT_DATA, "data", exc
    if code != EXIT_OK:
        print(f"error={kind} command={args.command} message={_quote(msg)}", file=sys.stderr)
        if run is not None:
            run.log("error", kind=kind, message=msg)
    if run is not None:
        run.close(code)
    return code


def entry_point():
    sys.exit(main())


if __name__ == "__main__":
    entry_point()
