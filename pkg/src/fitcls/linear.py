"""Multinomial logistic regression over TF-IDF or mean-embedding features."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from .autograd import log_softmax
from .corpus import FitLabel
from .errors import DimensionError, InputError, TrainingDivergedError
from .features import SparseVector
from .rng import stream

log = logging.getLogger(__name__)

N_CLASSES = len(FitLabel)
FEATURE_KINDS = ("tfidf", "mean_embedding")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 3
    l2: float = 1e-6
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if not self.lr > 0:
            raise InputError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise InputError("batch_size, patience and max_epochs must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise InputError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class LinearClassifier:
    W: np.ndarray
    b: np.ndarray
    feature_kind: str

    @classmethod
    def zeros(cls, dim: int, feature_kind: str) -> "LinearClassifier":
        if feature_kind not in FEATURE_KINDS:
            raise InputError(f"unknown feature kind {feature_kind!r}")
        return cls(np.zeros((N_CLASSES, dim)), np.zeros(N_CLASSES), feature_kind)

    @property
    def dim(self) -> int:
        return self.W.shape[1]

    def predict_logits(self, x) -> np.ndarray:
        """Logits for one vector (SparseVector or 1-d array) or a row matrix."""
        if isinstance(x, SparseVector):
            if x.dim != self.dim:
                raise DimensionError(f"feature dim {x.dim} != model dim {self.dim}")
            return self.W[:, list(x.indices)] @ np.asarray(x.weights) + self.b
        if sp.issparse(x) or np.ndim(x) == 2:
            if x.shape[1] != self.dim:
                raise DimensionError(f"feature dim {x.shape[1]} != model dim {self.dim}")
            return np.asarray(x @ self.W.T) + self.b
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim,):
            raise DimensionError(f"feature shape {x.shape} != ({self.dim},)")
        return self.W @ x + self.b

    def predict_label(self, x) -> FitLabel:
        # np.argmax returns the first maximum, i.e. the lowest class code
        return FitLabel(int(np.argmax(self.predict_logits(x))))

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_logits(X), axis=-1)


def cross_entropy(logits, label: int) -> float:
    """-log softmax(logits)[label], via log-sum-exp."""
    return float(-log_softmax(np.asarray(logits, dtype=np.float64))[int(label)])


def loss_and_grad(model: LinearClassifier, X, y, l2: float = 0.0):
    """Mean cross-entropy (+ l2/2 ||W||^2) over rows of X and its gradient (dW, db)."""
    y = np.asarray(y, dtype=np.int64)
    logits = model.predict_logits(X)
    logp = log_softmax(logits)
    n = len(y)
    loss = -logp[np.arange(n), y].mean() + 0.5 * l2 * float((model.W * model.W).sum())
    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    d /= n
    dW = np.asarray((X.T @ d).T) if sp.issparse(X) else d.T @ X
    return loss, dW + l2 * model.W, d.sum(axis=0)


def _mean_loss(model: LinearClassifier, X, y) -> tuple[float, float]:
    logits = model.predict_logits(X)
    logp = log_softmax(logits)
    y = np.asarray(y)
    loss = float(-logp[np.arange(len(y)), y].mean())
    acc = float((np.argmax(logits, axis=1) == y).mean())
    return loss, acc


@dataclass
class _LazyAdam:
    """Adam whose moments are only touched on the columns a batch activates."""

    shape: tuple
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.m = np.zeros(self.shape)
        self.v = np.zeros(self.shape)

    def update(self, param, grad, lr, cols=slice(None)):
        m = self.beta1 * self.m[..., cols] + (1 - self.beta1) * grad
        v = self.beta2 * self.v[..., cols] + (1 - self.beta2) * grad * grad
        self.m[..., cols] = m
        self.v[..., cols] = v
        m_hat = m / (1 - self.beta1 ** self.t)
        v_hat = v / (1 - self.beta2 ** self.t)
        param[..., cols] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainResult:
    model: LinearClassifier
    trace: list[dict]
    best_epoch: int


def train_linear(X_train, y_train, X_val, y_val, cfg: TrainConfig, feature_kind: str) -> TrainResult:
    """Minibatch cross-entropy training with early stopping on validation loss.

    Returns the parameters of the best validation epoch. For sparse inputs,
    each batch only reads and writes the weight columns its rows activate.
    """
    y_train = np.asarray(y_train, dtype=np.int64)
    y_val = np.asarray(y_val, dtype=np.int64)
    n, dim = X_train.shape
    if n == 0 or X_val.shape[0] == 0:
        raise InputError("training and validation sets must be non-empty")
    if X_val.shape[1] != dim:
        raise DimensionError(f"validation dim {X_val.shape[1]} != training dim {dim}")
    sparse = sp.issparse(X_train)
    if sparse:
        X_train = sp.csr_matrix(X_train)
    model = LinearClassifier.zeros(dim, feature_kind)
    rng = stream(cfg.seed, "linear-shuffle")
    adam_w, adam_b = _LazyAdam(model.W.shape), _LazyAdam(model.b.shape)
    trace: list[dict] = []
    best = (math.inf, 0, copy.deepcopy(model))
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            Xb, yb = X_train[idx], y_train[idx]
            if sparse:
                cols = np.unique(Xb.indices)
                Xb = Xb[:, cols]
                Wc = model.W[:, cols]
            else:
                cols = slice(None)
                Wc = model.W
            logits = np.asarray(Xb @ Wc.T) + model.b
            logp = log_softmax(logits)
            m = len(yb)
            total += float(-logp[np.arange(m), yb].sum())
            d = np.exp(logp)
            d[np.arange(m), yb] -= 1.0
            d /= m
            gW = (np.asarray((Xb.T @ d).T) if sparse else d.T @ Xb) + cfg.l2 * Wc
            gb = d.sum(axis=0)
            if cfg.optimizer == "adam":
                adam_w.t += 1
                adam_b.t += 1
                adam_w.update(model.W, gW, cfg.lr, cols)
                adam_b.update(model.b, gb, cfg.lr)
            else:
                model.W[:, cols] -= cfg.lr * gW
                model.b -= cfg.lr * gb
        val_loss, val_acc = _mean_loss(model, X_val, y_val)
        row = {"epoch": epoch, "train_loss": total / n, "val_loss": val_loss, "val_acc": val_acc}
        trace.append(row)
        log.debug("linear epoch %d: %s", epoch, row)
        if not (math.isfinite(val_loss) and math.isfinite(row["train_loss"])):
            raise TrainingDivergedError(f"validation loss diverged at epoch {epoch}", trace)
        if val_loss < best[0]:
            best = (val_loss, epoch, copy.deepcopy(model))
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return TrainResult(model=best[2], trace=trace, best_epoch=best[1])


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
