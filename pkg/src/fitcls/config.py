"""JSON run configuration with strict key checking, and canonical hashing."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import InputError
from .finetune import FineTunePlan
from .langmodel import LmArch, LmTrainConfig
from .linear import TrainConfig


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


@dataclass
class DatasetSection:
    path: str | None = None
    format: str = "synthetic"
    n: int = 600  # synthetic corpus size


@dataclass
class SplitSection:
    seed: int = 0
    test_frac: float = 0.2
    val_frac_of_train: float = 0.05


@dataclass
class VocabSection:
    min_freq: int = 1
    max_size: int | None = None


@dataclass
class TfidfSection:
    sublinear_tf: bool = False
    max_df: float | None = None


@dataclass
class EmbeddingSection:
    path: str | None = None
    d: int = 100


@dataclass
class LmArchSection:
    """LmArch without the vocabulary size, which comes from the data."""

    emb_dim: int = 256
    hidden: int = 256
    n_layers: int = 2
    dropout_emb: float = 0.1
    dropout_hidden: float = 0.2
    dropout_out: float = 0.2
    weight_drop: float = 0.2
    tie_weights: bool = True

    def __post_init__(self):
        self.build(1)

    def build(self, vocab_size: int) -> LmArch:
        return LmArch(vocab_size=vocab_size, **asdict(self))


@dataclass
class HeadSection:
    width: int = 50
    dropout: float = 0.1

    def __post_init__(self):
        if self.width < 1 or not 0.0 <= self.dropout < 1.0:
            raise InputError(f"invalid classifier head: {self}")


@dataclass
class Config:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    split: SplitSection = field(default_factory=SplitSection)
    vocab: VocabSection = field(default_factory=VocabSection)
    tfidf: TfidfSection = field(default_factory=TfidfSection)
    embeddings: EmbeddingSection = field(default_factory=EmbeddingSection)
    linear: TrainConfig = field(default_factory=TrainConfig)
    lm_arch: LmArchSection = field(default_factory=LmArchSection)
    lm: LmTrainConfig = field(default_factory=LmTrainConfig)
    finetune: FineTunePlan = field(default_factory=FineTunePlan)
    classifier: FineTunePlan = field(default_factory=FineTunePlan)
    head: HeadSection = field(default_factory=HeadSection)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    @classmethod
    def from_dict(cls, obj: dict) -> "Config":
        if not isinstance(obj, dict):
            raise InputError("configuration must be a JSON object")
        sections = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - set(sections))
        if unknown:
            raise InputError(f"unknown configuration section(s): {', '.join(unknown)}")
        built = {}
        for name, value in obj.items():
            section_type = sections[name].default_factory().__class__
            if not isinstance(value, dict):
                raise InputError(f"configuration section {name!r} must be an object")
            allowed = {f.name for f in dataclasses.fields(section_type)}
            bad = sorted(set(value) - allowed)
            if bad:
                raise InputError(f"unknown key(s) in section {name!r}: {', '.join(bad)}")
            try:
                built[name] = section_type(**value)
            except TypeError as exc:
                raise InputError(f"invalid section {name!r}: {exc}") from exc
        return cls(**built)


def load_config(path) -> Config:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    return Config.from_dict(obj)
