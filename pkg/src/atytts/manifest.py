"""Utterance manifests (JSON-lines)."""
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

from .audio import InvalidInput

ORIGINS = ("real", "tts", "vc", "augmented")


@dataclass
class UtteranceRecord:
    utterance_id: str
    audio_path: str
    transcript: str
    speaker_id: str
    intent: str
    entities: list = field(default_factory=list)  # [(type, value), ...]
    severity: Optional[float] = None
    origin: str = "real"
    seed: Optional[int] = None

    def __post_init__(self):
        self.entities = [tuple(e) for e in self.entities]
        if self.origin not in ORIGINS:
            raise InvalidInput(f"unknown origin {self.origin!r}")
        if self.severity is not None and not 0.0 <= self.severity <= 4.0:
            raise InvalidInput(f"severity {self.severity} outside [0, 4]")

    def to_json(self):
        d = asdict(self)
        d["entities"] = [list(e) for e in self.entities]
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


def write_manifest(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_manifest(path):
    with open(path, encoding="utf-8") as fh:
        return [UtteranceRecord.from_json(line) for line in fh if line.strip()]
