"""Micro-F1, confusion matrices, the majority baseline and JSON evaluation reports."""
from __future__ import annotations

import datetime as _dt
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import FitLabel, Review, dataset_checksum
from .errors import InputError, VocabMismatchError

SCHEMA_VERSION = 1
N_CLASSES = len(FitLabel)


def _as_labels(xs) -> np.ndarray:
    arr = np.asarray([int(x) for x in xs], dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= N_CLASSES):
        raise InputError(f"labels must lie in [0, {N_CLASSES})")
    return arr


def _check_pair(preds, golds) -> tuple[np.ndarray, np.ndarray]:
    p, g = _as_labels(preds), _as_labels(golds)
    if len(p) != len(g):
        raise InputError(f"{len(p)} predictions for {len(g)} gold labels")
    if len(p) == 0:
        raise InputError("cannot score an empty prediction set")
    return p, g


def micro_f1(preds, golds) -> float:
    """Micro-averaged F1; for single-label multiclass data this is accuracy."""
    p, g = _check_pair(preds, golds)
    return int((p == g).sum()) / len(p)


def micro_f1_from_counts(preds, golds) -> float:
    """Micro F1 pooled from per-class TP/FP/FN counts, computed without the accuracy shortcut."""
    p, g = _check_pair(preds, golds)
    tp = fp = fn = 0
    for c in range(N_CLASSES):
        tp += int(np.sum((p == c) & (g == c)))
        fp += int(np.sum((p == c) & (g != c)))
        fn += int(np.sum((p != c) & (g == c)))
    return 2 * tp / (2 * tp + fp + fn)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with rows indexed by the gold label and columns by the prediction."""

    counts: tuple[tuple[int, ...], ...]

    @classmethod
    def from_labels(cls, preds, golds) -> "ConfusionMatrix":
        p, g = _check_pair(preds, golds)
        m = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
        np.add.at(m, (g, p), 1)
        return cls(tuple(tuple(int(v) for v in row) for row in m))

    @property
    def array(self) -> np.ndarray:
        return np.array(self.counts, dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.array.sum())

    def trace(self) -> int:
        return int(np.trace(self.array))

    def precision(self, c: int) -> float:
        col = int(self.array[:, c].sum())
        return self.counts[c][c] / col if col else 0.0

    def recall(self, c: int) -> float:
        row = int(self.array[c].sum())
        return self.counts[c][c] / row if row else 0.0


@dataclass
class EvalReport:
    dataset_id: str
    split: str
    model_id: str
    micro_f1: float
    per_class: dict
    confusion: list
    n: int
    config_hash: str
    dataset_checksum: str
    config: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION
    timestamp: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise InputError(f"unsupported report schema {d.get('schema_version')!r}")
        return cls(**d)


def build_report(preds, golds, *, dataset_id: str, split: str, model_id: str, config: dict | None = None,
                 config_hash: str = "", checksum: str = "", timestamp: bool = True) -> EvalReport:
    cm = ConfusionMatrix.from_labels(preds, golds)
    per_class = {lab.text: {"precision": cm.precision(lab), "recall": cm.recall(lab),
                            "support": int(cm.array[lab].sum())} for lab in FitLabel}
    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds") if timestamp else None
    return EvalReport(
        dataset_id=dataset_id, split=split, model_id=model_id,
        micro_f1=cm.trace() / cm.total, per_class=per_class, confusion=[list(r) for r in cm.counts],
        n=cm.total, config_hash=config_hash, dataset_checksum=checksum, config=dict(config or {}),
        timestamp=stamp,
    )


def majority_label(train_labels) -> FitLabel:
    y = _as_labels(train_labels)
    if len(y) == 0:
        raise InputError("majority baseline needs at least one training label")
    # argmax picks the lowest code among tied counts
    return FitLabel(int(np.argmax(np.bincount(y, minlength=N_CLASSES))))


def majority_baseline(train_labels, eval_labels, *, dataset_id: str = "", split: str = "test",
                      checksum: str = "", timestamp: bool = True) -> EvalReport:
    label = majority_label(train_labels)
    golds = _as_labels(eval_labels)
    return build_report([label] * len(golds), golds, dataset_id=dataset_id, split=split,
                        model_id=f"majority:{label.text}", config={"majority_label": label.text},
                        checksum=checksum, timestamp=timestamp)


def evaluate(predict: Callable[[Sequence[Review]], Sequence[int]], reviews: Sequence[Review], *,
             model_vocab_hash: str | None, data_vocab_hash: str | None, dataset_id: str, split: str,
             model_id: str, config: dict | None = None, config_hash: str = "",
             timestamp: bool = True) -> EvalReport:
    """Score ``predict`` on ``reviews`` in their stored order.

    The model's vocabulary hash must match the one derived from the data, otherwise
    features would be computed against the wrong index.
    """
    if model_vocab_hash != data_vocab_hash:
        raise VocabMismatchError(
            f"model vocabulary {model_vocab_hash} does not match data vocabulary {data_vocab_hash}")
    if not reviews:
        raise InputError(f"split {split!r} is empty")
    preds = list(predict(reviews))
    golds = [r.label for r in reviews]
    return build_report(preds, golds, dataset_id=dataset_id, split=split, model_id=model_id,
                        config=config, config_hash=config_hash, checksum=dataset_checksum(reviews),
                        timestamp=timestamp)


def render_table(reports: Sequence[EvalReport], title: str = "Micro-F1 on the test set") -> str:
    """Aligned text table, one row per model and one column per dataset."""
    datasets = sorted({r.dataset_id for r in reports})
    models: list[str] = []
    for r in reports:
        if r.model_id not in models:
            models.append(r.model_id)
    scores = {(r.model_id, r.dataset_id): r.micro_f1 for r in reports}
    width = max([len("Model")] + [len(m) for m in models])
    cols = [max(len(d), 6) for d in datasets]
    lines = [title, "Model".ljust(width) + "".join("  " + d.rjust(w) for d, w in zip(datasets, cols))]
    for m in models:
        cells = []
        for d, w in zip(datasets, cols):
            s = scores.get((m, d))
            cells.append("  " + ("-" if s is None else f"{s:.4f}").rjust(w))
        lines.append(m.ljust(width) + "".join(cells))
    return "\n".join(lines)
