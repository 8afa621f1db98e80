"""Review ingestion, tokenization, vocabulary, splitting and a synthetic corpus."""
from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import EmptyDatasetError, InputError
from .rng import fisher_yates, stream

log = logging.getLogger(__name__)

FORMATS = ("modcloth", "rtr")
TEST_FRAC = 0.20
VAL_FRAC_OF_TRAIN = 0.05
MIN_SPLIT_SIZE = 20


class FitLabel(enum.IntEnum):
    FIT = 0
    SMALL = 1
    LARGE = 2

    @classmethod
    def parse(cls, value: str) -> "FitLabel":
        return cls[value.strip().upper()]

    @property
    def text(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class Review:
    id: str
    text: str
    label: FitLabel

    def __post_init__(self):
        if not self.text.strip():
            raise InputError(f"review {self.id!r} has empty text")

    def to_json(self) -> dict:
        return {"id": self.id, "text": self.text, "label": self.label.text}

    @classmethod
    def from_json(cls, obj: dict) -> "Review":
        return cls(id=str(obj["id"]), text=obj["text"], label=FitLabel.parse(obj["label"]))


# ---------------------------------------------------------------------------
# loading

def load_reviews_counted(path, fmt: str, include_summary: bool = True) -> tuple[list[Review], int]:
    """Like :func:`load_reviews` but also return the number of skipped records."""
    if fmt not in FORMATS:
        raise InputError(f"unknown dataset format {fmt!r}; expected one of {FORMATS}")
    path = Path(path)
    reviews: list[Review] = []
    skipped = 0
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}: malformed JSON on line {line_no}: {exc.msg}") from None
            review = _record_to_review(record, f"{fmt}-{line_no}", include_summary)
            if review is None:
                skipped += 1
            else:
                reviews.append(review)
    if not reviews:
        raise EmptyDatasetError(f"{path}: no usable records ({skipped} skipped)")
    if skipped:
        log.info("%s: skipped %d records without label or review text", path, skipped)
    return reviews, skipped


def load_reviews(path, fmt: str, include_summary: bool = True) -> list[Review]:
    """Read a JSON-lines review dump (one object per line) in file order.

    Records need a ``fit`` value in {fit, small, large} and a non-empty
    ``review_text``; others are skipped. When ``include_summary`` is set, a
    non-empty ``review_summary`` is prepended to the text with a space.
    """
    return load_reviews_counted(path, fmt, include_summary)[0]


def _record_to_review(record, review_id: str, include_summary: bool) -> Review | None:
    if not isinstance(record, dict):
        return None
    fit = record.get("fit")
    text = record.get("review_text")
    if not isinstance(fit, str) or fit.strip().lower() not in ("fit", "small", "large"):
        return None
    if not isinstance(text, str) or not text.strip():
        return None
    summary = record.get("review_summary")
    if include_summary and isinstance(summary, str) and summary.strip():
        text = summary + " " + text
    return Review(id=review_id, text=text, label=FitLabel.parse(fit))


# ---------------------------------------------------------------------------
# tokenization and vocabulary

_TOKEN_RE = re.compile(r"[^\W_]+|[^\w\s]|_")


def tokenize(text: str) -> list[str]:
    """Lowercase, keep letter/digit runs, split every punctuation char off."""
    return _TOKEN_RE.findall(text.lower())


UNK, PAD, BOS, EOS = 0, 1, 2, 3
SPECIALS = ("<unk>", "<pad>", "<bos>", "<eos>")


class Vocabulary:
    """Dense token index space; indices 0-3 are the special tokens."""

    def __init__(self, tokens: Sequence[str], freqs: Sequence[int]):
        if tuple(tokens[:4]) != SPECIALS:
            raise InputError("vocabulary must start with the special tokens")
        if len(tokens) != len(freqs):
            raise InputError("tokens and frequencies differ in length")
        self.tokens = tuple(tokens)
        self.freqs = tuple(int(f) for f in freqs)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise InputError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens and self.freqs == other.freqs

    @property
    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "freqs": list(self.freqs)}

    @classmethod
    def from_dict(cls, obj: dict) -> "Vocabulary":
        return cls(obj["tokens"], obj["freqs"])


def build_vocabulary_from_tokens(docs: Iterable[Sequence[str]], min_freq: int = 1,
                                 max_size: int | None = None) -> Vocabulary:
    if min_freq < 1:
        raise InputError(f"min_freq must be >= 1, got {min_freq}")
    if max_size is not None and max_size <= len(SPECIALS):
        raise InputError(f"max_size must exceed {len(SPECIALS)}, got {max_size}")
    counts: Counter[str] = Counter()
    for doc in docs:
        counts.update(doc)
    kept = sorted(((t, c) for t, c in counts.items() if c >= min_freq), key=lambda tc: (-tc[1], tc[0]))
    if max_size is not None:
        kept = kept[: max_size - len(SPECIALS)]
    if not kept:
        raise EmptyDatasetError(f"no token reaches min_freq={min_freq}")
    return Vocabulary(SPECIALS + tuple(t for t, _ in kept), (0,) * len(SPECIALS) + tuple(c for _, c in kept))


def build_vocabulary(reviews: Iterable[Review], min_freq: int = 1, max_size: int | None = None) -> Vocabulary:
    return build_vocabulary_from_tokens((tokenize(r.text) for r in reviews), min_freq, max_size)


def encode(tokens: Iterable[str], vocab: Vocabulary) -> list[int]:
    index = vocab.index
    return [index.get(t, UNK) for t in tokens]


def decode(indices: Iterable[int], vocab: Vocabulary) -> list[str]:
    return [vocab.tokens[i] for i in indices]


# ---------------------------------------------------------------------------
# splitting

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class SplitDataset:
    train: tuple[Review, ...]
    validation: tuple[Review, ...]
    test: tuple[Review, ...]
    seed: int
    test_frac: float = TEST_FRAC
    val_frac_of_train: float = VAL_FRAC_OF_TRAIN

    def counts(self) -> dict:
        return {"train": len(self.train), "validation": len(self.validation), "test": len(self.test)}

    def part(self, name: str) -> tuple[Review, ...]:
        if name not in ("train", "validation", "test"):
            raise InputError(f"unknown split {name!r}")
        return getattr(self, name)


def split_sizes(n: int, test_frac: float = TEST_FRAC, val_frac: float = VAL_FRAC_OF_TRAIN) -> tuple[int, int, int]:
    """Return (train, validation, test) sizes for ``n`` reviews."""
    n_test = _round_half_up(test_frac * n)
    n_val = _round_half_up(val_frac * (n - n_test))
    return n - n_test - n_val, n_val, n_test


def split(reviews: Sequence[Review], seed: int, test_frac: float = TEST_FRAC,
          val_frac: float = VAL_FRAC_OF_TRAIN) -> SplitDataset:
    """Seeded 80/20 train/test split with 5% of train carved out for validation.

    The shuffled order is kept inside each partition: test takes the first
    slice of the permutation, validation the next, train the rest.
    """
    n = len(reviews)
    if n < MIN_SPLIT_SIZE:
        raise InputError(f"need at least {MIN_SPLIT_SIZE} reviews to split, got {n}")
    if not (0 < test_frac < 1 and 0 <= val_frac < 1):
        raise InputError(f"split fractions out of range: test={test_frac}, val={val_frac}")
    _, n_val, n_test = split_sizes(n, test_frac, val_frac)
    perm = fisher_yates(n, stream(seed, "split"))
    shuffled = [reviews[i] for i in perm]
    return SplitDataset(
        train=tuple(shuffled[n_test + n_val:]),
        validation=tuple(shuffled[n_test:n_test + n_val]),
        test=tuple(shuffled[:n_test]),
        seed=seed,
        test_frac=test_frac,
        val_frac_of_train=val_frac,
    )


# ---------------------------------------------------------------------------
# synthetic corpus

SYNTHETIC_PHRASES = {
    FitLabel.SMALL: ("it runs small", "the waist is too tight", "way too tight in the hips",
                     "definitely runs small", "the bust was too tight"),
    FitLabel.LARGE: ("it is too big", "it runs large", "way too big in the shoulders",
                     "definitely runs large", "the waist was too big"),
    FitLabel.FIT: ("it fits perfectly", "true to size", "fits perfectly everywhere",
                   "the cut is true to size", "it fits perfectly in the waist"),
}

# label-consistent follow-ups, so what comes after a fit phrase depends on the label
SYNTHETIC_FOLLOWUPS = {
    FitLabel.SMALL: ("i had to size up", "next time i will order one size up", "i exchanged it for a size up"),
    FitLabel.LARGE: ("i had to size down", "next time i will order one size down", "i exchanged it for a size down"),
    FitLabel.FIT: ("i kept my usual size", "next time i will order the same size", "no exchange needed"),
}

_FILLER_OPEN = (
    "i ordered this dress for a wedding", "the color is lovely", "bought this for work",
    "the fabric feels soft", "shipping was quick", "i love the pattern", "this top is cute",
    "the material is nice and thick", "got so many compliments", "my sister has the same one",
    "the print is even better in person", "i wore it to a party",
)
_FILLER_CLOSE = (
    "would buy again", "the stitching looks sturdy", "not sure about the color though",
    "it washes well", "great for summer", "pockets are a bonus", "overall happy with it",
    "it wrinkles a little", "the zipper is smooth", "",
)


def generate_synthetic_corpus(n: int, seed: int) -> list[Review]:
    """Templated reviews whose label is revealed by one phrase per review.

    Classes are balanced to within one review. Most reviews follow the phrase
    with a label-consistent sentence ("i had to size up"); the rest is drawn
    from label-neutral filler.
    """
    if n < 30:
        raise InputError(f"synthetic corpus needs n >= 30, got {n}")
    rng = stream(seed, "synthetic")
    labels = [FitLabel(i % 3) for i in range(n)]
    labels = [labels[i] for i in fisher_yates(n, rng)]
    reviews = []
    for i, label in enumerate(labels):
        parts = [_FILLER_OPEN[int(rng.integers(len(_FILLER_OPEN)))]]
        if rng.random() < 0.5:
            parts.append(_FILLER_OPEN[int(rng.integers(len(_FILLER_OPEN)))])
        phrases = SYNTHETIC_PHRASES[label]
        at = int(rng.integers(len(parts) + 1))
        parts.insert(at, phrases[int(rng.integers(len(phrases)))])
        if rng.random() < 0.75:
            followups = SYNTHETIC_FOLLOWUPS[label]
            parts.insert(at + 1, followups[int(rng.integers(len(followups)))])
        close = _FILLER_CLOSE[int(rng.integers(len(_FILLER_CLOSE)))]
        if close:
            parts.append(close)
        end = "!" if rng.random() < 0.3 else "."
        text = ". ".join(p[0].upper() + p[1:] for p in parts) + end
        reviews.append(Review(id=f"syn-{seed}-{i:05d}", text=text, label=label))
    return reviews


# ---------------------------------------------------------------------------
# statistics and prepared-split directories

def dataset_stats(reviews: Sequence[Review]) -> dict:
    """Table-style summary: datapoints, mean token count, vocabulary size, labels."""
    if not reviews:
        raise EmptyDatasetError("cannot compute statistics of an empty dataset")
    docs = [tokenize(r.text) for r in reviews]
    vocab = build_vocabulary_from_tokens(docs, min_freq=1)
    hist = Counter(r.label for r in reviews)
    return {
        "count": len(reviews),
        "avg_tokens": sum(len(d) for d in docs) / len(docs),
        "vocab_size": len(vocab) - len(SPECIALS),
        "label_histogram": {label.text: hist.get(label, 0) for label in FitLabel},
    }


def dataset_checksum(reviews: Iterable[Review]) -> str:
    h = hashlib.sha256()
    for r in reviews:
        h.update(json.dumps(r.to_json(), sort_keys=True, ensure_ascii=False).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


SPLIT_FILES = {"train": "train.jsonl", "validation": "validation.jsonl", "test": "test.jsonl"}


def write_split(ds: SplitDataset, out_dir, extra_meta: dict | None = None) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, fname in SPLIT_FILES.items():
        with (out_dir / fname).open("w", encoding="utf-8") as fh:
            for r in ds.part(name):
                fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")
    meta = {
        "seed": ds.seed,
        "counts": ds.counts(),
        "ratios": {"test_frac": ds.test_frac, "val_frac_of_train": ds.val_frac_of_train},
        "checksum": dataset_checksum(ds.train + ds.validation + ds.test),
    }
    meta.update(extra_meta or {})
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return meta


def read_split(data_dir) -> tuple[SplitDataset, dict]:
    data_dir = Path(data_dir)
    meta_path = data_dir / "meta.json"
    if not meta_path.is_file():
        raise InputError(f"{data_dir} is not a prepared data directory (missing meta.json)")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    parts = {}
    for name, fname in SPLIT_FILES.items():
        with (data_dir / fname).open("r", encoding="utf-8") as fh:
            parts[name] = tuple(Review.from_json(json.loads(line)) for line in fh if line.strip())
    ratios = meta.get("ratios", {})
    ds = SplitDataset(seed=int(meta["seed"]), test_frac=ratios.get("test_frac", TEST_FRAC),
                      val_frac_of_train=ratios.get("val_frac_of_train", VAL_FRAC_OF_TRAIN), **parts)
    return ds, meta
