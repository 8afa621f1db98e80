"""TF-IDF sparse vectors and mean-pooled pretrained embeddings."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .corpus import SPECIALS, Vocabulary
from .errors import DimensionError, EmptyDatasetError, InputError
from .rng import stream


@dataclass(frozen=True)
class SparseVector:
    indices: tuple[int, ...]
    weights: tuple[float, ...]
    dim: int

    def __post_init__(self):
        if len(self.indices) != len(self.weights):
            raise DimensionError("indices and weights differ in length")
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise InputError("sparse indices must be strictly increasing")
        if self.indices and not (0 <= self.indices[0] and self.indices[-1] < self.dim):
            raise DimensionError(f"sparse index out of range for dim {self.dim}")
        if not all(math.isfinite(w) for w in self.weights):
            raise InputError("sparse weights must be finite")

    @property
    def entries(self) -> list[tuple[int, float]]:
        return list(zip(self.indices, self.weights))

    def norm(self) -> float:
        return math.sqrt(sum(w * w for w in self.weights))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[list(self.indices)] = self.weights
        return out


def stack_sparse(vectors: Sequence[SparseVector], dim: int | None = None) -> sp.csr_matrix:
    """Row-stack sparse vectors into a CSR matrix."""
    if dim is None:
        if not vectors:
            raise InputError("cannot infer the dimension of an empty batch")
        dim = vectors[0].dim
    indptr = np.zeros(len(vectors) + 1, dtype=np.int64)
    for i, v in enumerate(vectors):
        if v.dim != dim:
            raise DimensionError(f"row {i} has dim {v.dim}, expected {dim}")
        indptr[i + 1] = indptr[i] + len(v.indices)
    indices = np.fromiter((j for v in vectors for j in v.indices), dtype=np.int64, count=int(indptr[-1]))
    data = np.fromiter((w for v in vectors for w in v.weights), dtype=np.float64, count=int(indptr[-1]))
    return sp.csr_matrix((data, indices, indptr), shape=(len(vectors), dim))


# ---------------------------------------------------------------------------
# TF-IDF

@dataclass(frozen=True)
class TfidfModel:
    idf: np.ndarray
    df: np.ndarray
    doc_count: int
    sublinear_tf: bool = False

    @property
    def dim(self) -> int:
        return len(self.idf)


def smoothed_idf(df, n_docs: int):
    return np.log((1.0 + n_docs) / (1.0 + np.asarray(df, dtype=np.float64))) + 1.0


def fit_tfidf(train_docs: Sequence[Sequence[int]], vocab_dim: int, sublinear_tf: bool = False,
              max_df: float | None = None) -> TfidfModel:
    """Document frequencies over encoded training docs and smoothed idf.

    ``max_df`` (fraction of documents) zeroes the idf of terms at or above it,
    which drops them from every transformed vector.
    """
    if not any(len(d) for d in train_docs):
        raise EmptyDatasetError("all training documents are empty")
    df = np.zeros(vocab_dim, dtype=np.int64)
    for doc in train_docs:
        df[np.unique(np.asarray(doc, dtype=np.int64))] += 1
    n = len(train_docs)
    idf = smoothed_idf(df, n)
    if max_df is not None:
        idf[df >= max_df * n] = 0.0
    idf.flags.writeable = False
    df.flags.writeable = False
    return TfidfModel(idf=idf, df=df, doc_count=n, sublinear_tf=sublinear_tf)


def transform_tfidf(doc: Sequence[int], model: TfidfModel) -> SparseVector:
    counts = Counter(doc)
    idx = sorted(counts)
    tf = np.array([counts[i] for i in idx], dtype=np.float64)
    if model.sublinear_tf:
        tf = 1.0 + np.log(tf)
    w = tf * model.idf[idx] if idx else tf
    keep = w != 0.0
    w = w[keep]
    idx = [i for i, k in zip(idx, keep) if k]
    norm = math.sqrt(float(w @ w)) if len(w) else 0.0
    if norm > 0.0:
        w = w / norm
    return SparseVector(tuple(int(i) for i in idx), tuple(float(x) for x in w), model.dim)


def tfidf_matrix(docs: Sequence[Sequence[int]], model: TfidfModel) -> sp.csr_matrix:
    return stack_sparse([transform_tfidf(d, model) for d in docs], model.dim)


# ---------------------------------------------------------------------------
# embeddings

@dataclass(frozen=True)
class EmbeddingTable:
    matrix: np.ndarray
    coverage: float

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def load_embeddings(path, vocab: Vocabulary, d: int = 100) -> EmbeddingTable:
    """Read a whitespace-separated text embedding file ("token v1 ... vd" per line).

    Only rows for tokens in ``vocab`` are kept; everything else, including the
    special tokens, stays zero. A leading word2vec-style "count dim" header is
    tolerated.
    """
    path = Path(path)
    matrix = np.zeros((len(vocab), d))
    found = np.zeros(len(vocab), dtype=bool)
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").rstrip().split(" ")
            if not parts or parts == [""]:
                continue
            if line_no == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue
            if len(parts) != d + 1:
                raise DimensionError(f"{path}: line {line_no} has {len(parts) - 1} values, expected {d}")
            idx = vocab.index.get(parts[0])
            if idx is None or idx < len(SPECIALS) or found[idx]:
                continue
            try:
                row = np.array([float(x) for x in parts[1:]])
            except ValueError:
                raise InputError(f"{path}: line {line_no} has a non-numeric value") from None
            if not np.all(np.isfinite(row)):
                raise InputError(f"{path}: line {line_no} has a non-finite value")
            matrix[idx] = row
            found[idx] = True
    n_regular = len(vocab) - len(SPECIALS)
    coverage = float(found.sum()) / n_regular if n_regular else 0.0
    matrix.flags.writeable = False
    return EmbeddingTable(matrix=matrix, coverage=coverage)


def save_embeddings(path, table: EmbeddingTable, vocab: Vocabulary) -> None:
    """Write the non-special, non-zero rows in the text format ``load_embeddings`` reads."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for idx in range(len(SPECIALS), len(vocab)):
            row = table.matrix[idx]
            if not row.any():
                continue
            fh.write(vocab.tokens[idx] + " " + " ".join(repr(float(x)) for x in row) + "\n")


def random_embedding_file(path, vocab: Vocabulary, d: int, seed: int) -> None:
    """Write Gaussian vectors for every regular token (a stand-in for pretrained vectors in tests)."""
    rng = stream(seed, "embeddings")
    mat = np.zeros((len(vocab), d))
    mat[len(SPECIALS):] = rng.standard_normal((len(vocab) - len(SPECIALS), d)) / math.sqrt(d)
    save_embeddings(path, EmbeddingTable(mat, 1.0), vocab)


def mean_pool(doc: Sequence[int], table: EmbeddingTable) -> np.ndarray:
    if len(doc) == 0:
        return np.zeros(table.dim)
    return table.matrix[np.asarray(doc, dtype=np.int64)].mean(axis=0)


def mean_pool_matrix(docs: Sequence[Sequence[int]], table: EmbeddingTable) -> np.ndarray:
    out = np.zeros((len(docs), table.dim))
    for i, doc in enumerate(docs):
        out[i] = mean_pool(doc, table)
    return out
