"""Spoken-language-understanding harness: classifier, metrics, splits and reports."""
import csv
import io
import logging
import math
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .audio import as_frames
from .errors import InvalidInput
from .modules import pad_stack, sequence_mask

log = logging.getLogger(__name__)

LOW_HIGH_THRESHOLD = 1.5
CHECKPOINT_FORMAT = "atytts-slu"


# --------------------------------------------------------------------------
# grouping and splits
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SeverityGroup:
    group: str
    threshold: float = LOW_HIGH_THRESHOLD


def assign_group(severity):
    """``Low`` iff severity <= 1.5 on the 0-4 scale."""
    s = float(severity)
    if not 0.0 <= s <= 4.0 or math.isnan(s):
        raise InvalidInput(f"severity {severity} outside [0, 4]")
    return SeverityGroup("Low" if s <= LOW_HIGH_THRESHOLD else "High")


def make_cv_splits(speakers, k, seed=0):
    """Partition ``speakers`` into ``k`` test folds; returns [(train, test), ...]."""
    speakers = list(speakers)
    if len(set(speakers)) != len(speakers):
        raise InvalidInput("duplicate speaker ids")
    if not 1 <= k <= len(speakers):
        raise InvalidInput(f"k={k} must be between 1 and the number of speakers ({len(speakers)})")
    order = np.random.default_rng(seed).permutation(len(speakers))
    folds = [sorted(speakers[i] for i in order[j::k]) for j in range(k)]
    return [(sorted(s for s in speakers if s not in set(test)), test) for test in folds]


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


@dataclass
class SluExample:
    mel: np.ndarray  # (T, F)
    intent: str
    entities: tuple = ()
    speaker_id: str = ""
    severity: float = None
    origin: str = "real"
    utterance_id: str = ""


@dataclass
class SluConfig:
    hidden: int = 64
    n_layers: int = 3
    kernel_size: int = 5
    epochs: int = 30
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 0.0
    seed: int = 0
    entity_threshold: float = 0.5


class SluModel(nn.Module):
    """Strided conv stack with mean+max pooling, an intent head and a bag-of-entities head."""

    def __init__(self, n_feats, intents, entities, cfg):
        super().__init__()
        self.intents = list(intents)
        self.entities = [tuple(e) for e in entities]
        self.cfg = cfg
        self.n_feats = n_feats
        self.register_buffer("feat_mean", torch.zeros(n_feats))
        self.register_buffer("feat_std", torch.ones(n_feats))
        layers, ch = [], n_feats
        for _ in range(cfg.n_layers):
            layers.append(nn.Conv1d(ch, cfg.hidden, cfg.kernel_size, stride=2, padding=cfg.kernel_size // 2))
            ch = cfg.hidden
        self.convs = nn.ModuleList(layers)
        self.act = nn.SiLU()
        self.intent_head = nn.Linear(2 * cfg.hidden, len(self.intents))
        self.entity_head = nn.Linear(2 * cfg.hidden, max(1, len(self.entities)))

    def forward(self, x, lengths):
        x = (x - self.feat_mean[None, :, None]) / self.feat_std[None, :, None]
        for conv in self.convs:
            x = self.act(conv(x))
            lengths = (lengths - 1) // 2 + 1
        mask = sequence_mask(lengths, x.shape[-1]).to(x.dtype)
        mean = (x * mask).sum(-1) / mask.sum(-1)
        mx = (x * mask - 1e4 * (1 - mask)).amax(-1)
        h = torch.cat([mean, mx], dim=1)
        return self.intent_head(h), self.entity_head(h)


def _tensors(examples, dtype=torch.float32):
    x, lengths = pad_stack([np.asarray(as_frames(ex.mel)).T for ex in examples], dtype)
    return x, lengths


def _targets(model, examples):
    idx = {s: i for i, s in enumerate(model.intents)}
    ent = {e: i for i, e in enumerate(model.entities)}
    y_int = torch.tensor([idx[ex.intent] for ex in examples], dtype=torch.long)
    y_ent = torch.zeros(len(examples), max(1, len(model.entities)))
    for i, ex in enumerate(examples):
        for e in ex.entities:
            y_ent[i, ent[tuple(e)]] = 1.0
    return y_int, y_ent


def train_slu(train, cfg=None, intents=None, entities=None, log_rows=None, model=None):
    """Fit an :class:`SluModel` on ``train``.

    ``intents``/``entities`` fix the label maps (defaults: labels seen in
    ``train``).  A training set with a single intent class is refused.
    Passing ``model`` continues training it (its label maps and feature
    statistics are kept).
    """
    cfg = cfg or SluConfig()
    if not train:
        raise InvalidInput("empty training set")
    seen = sorted({ex.intent for ex in train})
    if len(seen) < 2:
        raise InvalidInput(f"training set has a single intent class ({seen[0]!r}); refusing to train")
    if model is not None:
        intents, entities = model.intents, model.entities
    intents = sorted(intents) if intents is not None else seen
    missing = set(seen) - set(intents)
    if missing:
        raise InvalidInput(f"intents outside the label set: {sorted(missing)}")
    entities = sorted({tuple(e) for e in entities}) if entities is not None else \
        sorted({tuple(e) for ex in train for e in ex.entities})
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        n_feats = np.asarray(as_frames(train[0].mel)).shape[1]
        model = SluModel(n_feats, intents, entities, cfg)
        allf = np.concatenate([np.asarray(as_frames(ex.mel)) for ex in train]).astype(np.float64)
        model.feat_mean.copy_(torch.as_tensor(allf.mean(0), dtype=torch.float32))
        model.feat_std.copy_(torch.as_tensor(allf.std(0) + 1e-3, dtype=torch.float32))
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    ce, bce = nn.CrossEntropyLoss(), nn.BCEWithLogitsLoss()
    model.train()
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(train), cfg.batch_size):
            batch = [train[i] for i in order[start:start + cfg.batch_size]]
            x, lengths = _tensors(batch)
            y_int, y_ent = _targets(model, batch)
            li, le = model(x, lengths)
            loss = ce(li, y_int) + (bce(le, y_ent) if model.entities else 0.0)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            if log_rows is not None:
                log_rows.append({"epoch": epoch, "step": step, "loss": loss.item()})
    model.eval()
    return model


@torch.no_grad()
def predict(model, examples, batch_size=64):
    """Return ``[(intent, frozenset(entities)), ...]`` in input order."""
    out = []
    for start in range(0, len(examples), batch_size):
        batch = examples[start:start + batch_size]
        li, le = model(*_tensors(batch))
        probs = torch.sigmoid(le)
        for i in range(len(batch)):
            ents = frozenset(model.entities[j] for j in range(len(model.entities))
                             if probs[i, j] > model.cfg.entity_threshold)
            out.append((model.intents[int(li[i].argmax())], ents))
    return out


def accuracy_from_predictions(gold, predicted):
    if len(gold) == 0:
        raise InvalidInput("empty test set")
    if len(gold) != len(predicted):
        raise InvalidInput("gold and predicted lengths differ")
    return sum(g == p for g, p in zip(gold, predicted)) / len(gold)


def f1_from_predictions(gold, predicted):
    """Micro exact-match F1 over (type, value) tuples."""
    if len(gold) == 0:
        raise InvalidInput("empty test set")
    tp = fp = fn = 0
    for g, p in zip(gold, predicted):
        g, p = set(map(tuple, g)), set(map(tuple, p))
        tp += len(g & p)
        fp += len(p - g)
        fn += len(g - p)
    if tp == 0:
        return 0.0 if (fp or fn) else 1.0
    precision, recall = tp / (tp + fp), tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def intent_accuracy(model, test):
    if not test:
        raise InvalidInput("empty test set")
    pred = predict(model, test)
    return accuracy_from_predictions([ex.intent for ex in test], [p[0] for p in pred])


def slu_f1(model, test):
    if not test:
        raise InvalidInput("empty test set")
    pred = predict(model, test)
    return f1_from_predictions([ex.entities for ex in test], [p[1] for p in pred])


def save_slu(path, model):
    torch.save({"format": CHECKPOINT_FORMAT, "version": 1, "n_feats": model.n_feats,
                "intents": model.intents, "entities": [list(e) for e in model.entities],
                "config": asdict(model.cfg), "state_dict": model.state_dict()}, path)


def load_slu(path):
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInput(f"{path} is not an SLU checkpoint")
    model = SluModel(blob["n_feats"], blob["intents"], [tuple(e) for e in blob["entities"]],
                     SluConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model


# --------------------------------------------------------------------------
# subjective scores
# --------------------------------------------------------------------------


SCORE_COLUMNS = ("speaker_id", "trait", "source", "rater", "score")


@dataclass
class ScoreRow:
    speaker_id: str
    trait: str
    source: str
    rater: str
    score: float

    def __post_init__(self):
        self.score = float(self.score)
        if self.source not in ("real", "synthetic"):
            raise InvalidInput(f"source must be real or synthetic, got {self.source!r}")
        if not 0.0 <= self.score <= 4.0:
            raise InvalidInput(f"score {self.score} outside [0, 4]")


@dataclass
class SubjectiveStats:
    mae: float
    rmse: float
    r2: float
    n: int
    diagnostic: str = ""


def read_score_table(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SCORE_COLUMNS:
            raise InvalidInput(f"score table columns must be {SCORE_COLUMNS}")
        return [ScoreRow(**row) for row in reader]


def paired_scores(table, trait):
    """Per-speaker mean real and synthetic scores (averaged over raters)."""
    acc = {}
    for row in table:
        if row.trait == trait:
            acc.setdefault(row.speaker_id, {"real": [], "synthetic": []})[row.source].append(row.score)
    speakers = sorted(s for s, v in acc.items() if v["real"] and v["synthetic"])
    real = np.array([np.mean(acc[s]["real"]) for s in speakers])
    synth = np.array([np.mean(acc[s]["synthetic"]) for s in speakers])
    return speakers, real, synth


def score_stats(real, synth):
    real = np.asarray(real, dtype=np.float64)
    synth = np.asarray(synth, dtype=np.float64)
    if real.shape != synth.shape or real.size < 2:
        raise InvalidInput("need paired real/synthetic scores for at least 2 speakers")
    err = real - synth
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err ** 2)))
    ss_tot = float(np.sum((real - real.mean()) ** 2))
    if ss_tot == 0.0:
        return SubjectiveStats(mae, rmse, float("nan"), real.size, "reference scores have zero variance; R2 undefined")
    return SubjectiveStats(mae, rmse, 1.0 - float(np.sum(err ** 2)) / ss_tot, real.size)


def subjective_stats(table, trait):
    """MAE, RMSE and R2 between real (reference) and synthetic per-speaker scores."""
    _, real, synth = paired_scores(table, trait)
    return score_stats(real, synth)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


RESULT_COLUMNS = ("method", "hours", "seed", "fold", "utterance_id", "speaker_id", "group",
                  "gold_intent", "pred_intent", "gold_entities", "pred_entities")
SUMMARY_COLUMNS = ("method", "hours", "group", "n", "ica", "slu_f1")
ABSENT = "NA"


@dataclass
class PredictionRow:
    method: str
    hours: float
    seed: int
    fold: int
    utterance_id: str
    speaker_id: str
    group: str
    gold_intent: str
    pred_intent: str
    gold_entities: tuple = ()
    pred_entities: tuple = ()


def _fmt_entities(ents):
    return ";".join(f"{t}={v}" for t, v in sorted(map(tuple, ents)))


def summarize(rows):
    """Pool predictions per (method, hours, group) plus the pooled ``All`` group."""
    cells = {}
    for r in rows:
        for g in (r.group, "All"):
            cells.setdefault((r.method, float(r.hours), g), []).append(r)
    out = []
    for (method, hours, group) in sorted(cells, key=lambda k: (k[0], k[1], ("All", "High", "Low").index(k[2])
                                                               if k[2] in ("All", "High", "Low") else 9, k[2])):
        rs = cells[(method, hours, group)]
        ica = accuracy_from_predictions([r.gold_intent for r in rs], [r.pred_intent for r in rs])
        f1 = f1_from_predictions([r.gold_entities for r in rs], [r.pred_entities for r in rs])
        out.append({"method": method, "hours": hours, "group": group, "n": len(rs), "ica": ica, "slu_f1": f1})
    return out


def _csv_bytes(columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(row.get(c)) for c in columns])
    return buf.getvalue()


def _cell(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ABSENT
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _text_table(summary):
    methods = sorted({(r["method"], r["hours"]) for r in summary})
    groups = ("Low", "High", "All")
    head = f"{'method':<28}{'hours':>7}" + "".join(f"{g + ' ICA':>11}{g + ' F1':>10}" for g in groups)
    lines = [head, "-" * len(head)]
    index = {(r["method"], r["hours"], r["group"]): r for r in summary}
    for m, h in methods:
        cells = ""
        for g in groups:
            r = index.get((m, h, g))
            cells += f"{_cell(100 * r['ica']) if r else ABSENT:>11}{_cell(100 * r['slu_f1']) if r else ABSENT:>10}"
        lines.append(f"{m:<28}{h:>7g}{cells}")
    return "\n".join(lines) + "\n"


def sweep_table(summary):
    """Accuracy-vs-hours rows (pooled ``All`` group) for every method."""
    return [{"method": r["method"], "hours": r["hours"], "ica": r["ica"], "slu_f1": r["slu_f1"]}
            for r in summary if r["group"] == "All"]


def report_tables(rows, out_dir):
    """Write predictions, per-group summary, sweep table and a text rendering.

    Returns a dict of written paths.  Empty input gives header-only files.
    """
    os.makedirs(out_dir, exist_ok=True)
    pred = [{**asdict(r), "hours": float(r.hours), "gold_entities": _fmt_entities(r.gold_entities),
             "pred_entities": _fmt_entities(r.pred_entities)} for r in rows]
    summary = summarize(rows)
    files = {
        "predictions.csv": _csv_bytes(RESULT_COLUMNS, pred),
        "summary.csv": _csv_bytes(SUMMARY_COLUMNS, summary),
        "sweep.csv": _csv_bytes(("method", "hours", "ica", "slu_f1"), sweep_table(summary)),
        "summary.txt": _text_table(summary),
    }
    paths = {}
    for name, text in files.items():
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        paths[name] = path
    return paths
