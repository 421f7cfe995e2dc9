"""Run configuration: one YAML file with a section per module."""
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import yaml

from .audio import FeatureConfig
from .augment import AugmentPolicy
from .errors import InvalidInput
from .experiments import Scale
from .slu import SluConfig


@dataclass
class AtyConfig:
    speaker_id: str = ""
    vc_checkpoint: str = ""
    tts_checkpoint: str = ""
    hours_aux: float = 0.2
    lambda_speaker: float = 1.0
    lambda_atypical: float = 1.0
    crop_frames: int = 172
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 16


@dataclass
class RunConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    scale: Scale = field(default_factory=Scale)
    aty: AtyConfig = field(default_factory=AtyConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    slu: SluConfig = field(default_factory=SluConfig)
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    sweep_hours: list = field(default_factory=lambda: [0.0, 0.05, 0.1, 0.2])
    data_dir: str = ""
    checkpoint_every: int = 200

    def to_dict(self):
        return {
            "features": self.features.to_dict(),
            "scale": self.scale.to_dict(),
            "aty": asdict(self.aty),
            "augment": self.augment.to_dict(),
            "slu": asdict(self.slu),
            "seeds": list(self.seeds),
            "sweep_hours": [float(h) for h in self.sweep_hours],
            "data_dir": self.data_dir,
            "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        sections = {"features": FeatureConfig, "scale": Scale, "aty": AtyConfig, "slu": SluConfig}
        kwargs = {}
        for key, value in d.items():
            if key in sections:
                kwargs[key] = _build(sections[key], value)
            elif key == "augment":
                kwargs[key] = AugmentPolicy.from_dict(value or {})
            elif key in cls.__dataclass_fields__:
                kwargs[key] = value
            else:
                raise InvalidInput(f"unknown config section {key!r}")
        return cls(**kwargs)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def override(self, assignments):
        """Apply ``section.key=value`` strings (values parsed as YAML scalars)."""
        d = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise InvalidInput(f"override {item!r} is not key=value")
            path, raw = item.split("=", 1)
            value = yaml.safe_load(raw)
            node = d
            keys = path.split(".")
            for k in keys[:-1]:
                if not isinstance(node.get(k), dict):
                    raise InvalidInput(f"unknown config key {path!r}")
                node = node[k]
            if keys[-1] not in node:
                raise InvalidInput(f"unknown config key {path!r}")
            node[keys[-1]] = value
        return RunConfig.from_dict(d)


def _build(cls, value):
    value = dict(value or {})
    names = {f.name for f in fields(cls)}
    unknown = set(value) - names
    if unknown:
        raise InvalidInput(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**value)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return RunConfig.from_dict(yaml.safe_load(fh))


def save_config(path, cfg):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
