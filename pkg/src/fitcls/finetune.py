"""Transfer-learning procedure: LM fine-tuning, then a pooled classifier head.

Both stages use per-layer-group learning rates that decay by a constant
factor from the output toward the input, each following a slanted triangular
schedule over the stage's total step count. The classifier stage unfreezes one
group per epoch, starting with the head.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .corpus import EOS, PAD, FitLabel, Vocabulary, encode, tokenize
from .errors import DimensionError, InputError, NumericError, TrainingDivergedError
from .langmodel import LanguageModel, make_optimizer, make_stream, train_lm_epochs, batchify, bptt_windows
from .rng import stream

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# schedules

@dataclass(frozen=True)
class SlantedTriangularSchedule:
    lr_max: float
    total_steps: int
    cut_frac: float = 0.1
    ratio: float = 32.0

    def __post_init__(self):
        if not 0.0 < self.cut_frac < 1.0:
            raise InputError(f"cut_frac must be in (0, 1), got {self.cut_frac}")
        if not self.ratio > 1.0:
            raise InputError(f"ratio must exceed 1, got {self.ratio}")
        if self.total_steps < 1 or not self.lr_max > 0:
            raise InputError("total_steps must be >= 1 and lr_max positive")

    @property
    def cut(self) -> int:
        return math.floor(self.cut_frac * self.total_steps)


def schedule_lr(sched: SlantedTriangularSchedule, t: int) -> float:
    """Linear warm-up from lr_max/ratio to lr_max at ``cut``, then linear decay back."""
    T, cut = sched.total_steps, sched.cut
    if not 0 <= t <= T:
        raise InputError(f"step {t} outside [0, {T}]")
    p = t / cut if t < cut else 1.0 - (t - cut) / (T - cut)
    if p == 1.0:
        return sched.lr_max
    return sched.lr_max * (1.0 + p * (sched.ratio - 1.0)) / sched.ratio


@dataclass(frozen=True)
class DiscriminativeLrPlan:
    base_lr: float
    decay: float = 2.6


def layer_lrs(plan: DiscriminativeLrPlan, n_layers: int) -> list[float]:
    """Learning rates from the output group down: base, base/decay, base/decay^2, ..."""
    if n_layers < 1:
        raise InputError("need at least one layer group")
    return [plan.base_lr / plan.decay ** k for k in range(n_layers)]


@dataclass(frozen=True)
class UnfreezeSchedule:
    n_groups: int

    def trainable(self, epoch: int) -> frozenset[int]:
        """Group indices (0 = output side) trainable in 1-based ``epoch``."""
        if epoch < 1:
            raise InputError("epochs are numbered from 1")
        return frozenset(range(min(epoch, self.n_groups)))


@dataclass
class FineTunePlan:
    lr: float = 0.02
    decay: float = 2.6
    cut_frac: float = 0.1
    ratio: float = 32.0
    epochs: int = 8
    batch_size: int = 32
    patience: int | None = 3
    clip_norm: float = 5.0
    seed: int = 0
    optimizer: str = "adam"
    gradual_unfreeze: bool = True
    n_groups: int | None = None
    bptt_len: int = 70
    max_tokens: int = 400
    # encoder dropout while training the classifier; off by default because
    # max pooling over dropped-out states shifts the features the head sees
    encoder_dropout: bool = False

    def __post_init__(self):
        if not self.lr > 0 or self.epochs < 0 or self.batch_size < 1 or not self.decay > 0:
            raise InputError(f"invalid fine-tuning plan: {self}")
        if self.optimizer not in ("sgd", "adam"):
            raise InputError(f"unknown optimizer {self.optimizer!r}")
        # validate the schedule shape early
        SlantedTriangularSchedule(self.lr, 1, self.cut_frac, self.ratio)

    def schedules(self, n_groups: int, total_steps: int) -> list[SlantedTriangularSchedule]:
        lrs = layer_lrs(DiscriminativeLrPlan(self.lr, self.decay), n_groups)
        return [SlantedTriangularSchedule(lr, max(total_steps, 1), self.cut_frac, self.ratio) for lr in lrs]


def _group_lr_fn(groups: Sequence[Sequence[Tensor]], scheds: Sequence[SlantedTriangularSchedule]):
    def lr_fn(step: int) -> dict[int, float]:
        out = {}
        for params, sched in zip(groups, scheds):
            lr = schedule_lr(sched, min(step, sched.total_steps))
            for p in params:
                out[id(p)] = lr
        return out
    return lr_fn


# ---------------------------------------------------------------------------
# LM fine-tuning

def finetune_lm(pretrained: LanguageModel, train_docs: Sequence[Sequence[int]], val_docs: Sequence[Sequence[int]],
                plan: FineTunePlan):
    """Continue next-word training on target-domain text; the input model is left untouched.

    Returns ``(model, trace)`` with the best validation-perplexity snapshot.
    """
    train_tokens, val_tokens = make_stream(train_docs), make_stream(val_docs)
    if len(train_tokens) < 2 or len(val_tokens) < 2:
        raise InputError("fine-tuning needs non-empty target text")
    model = copy.deepcopy(pretrained)
    if plan.epochs == 0:
        return model, []
    groups = model.layer_groups(include_decoder=True)
    steps_per_epoch = sum(1 for _ in bptt_windows(batchify(train_tokens, plan.batch_size), plan.bptt_len))
    scheds = plan.schedules(len(groups), plan.epochs * steps_per_epoch)
    opt = make_optimizer(plan.optimizer, model.params())
    trace, _ = train_lm_epochs(model, train_tokens, val_tokens, epochs=plan.epochs, batch_size=plan.batch_size,
                               bptt=plan.bptt_len, clip_norm=plan.clip_norm, lr_fn=_group_lr_fn(groups, scheds),
                               optimizer=opt, patience=plan.patience, seed=plan.seed, stage="lm-finetune")
    return model, trace


# ---------------------------------------------------------------------------
# classifier

class ClassifierHead:
    """Concat pooling [last, mean, max] -> batch norm -> linear(width) -> ReLU -> dropout -> linear(3).

    The batch norm removes the large shared offset of pooled LSTM features;
    without it a single Adam step can switch a ReLU unit off for every input.
    """

    def __init__(self, hidden: int, width: int = 50, dropout: float = 0.1, seed: int = 0):
        rng = stream(seed, "head-init")
        in_dim = 3 * hidden
        k1, k2 = 1.0 / math.sqrt(in_dim), 1.0 / math.sqrt(width)
        self.in_dim, self.width, self.dropout = in_dim, width, dropout
        self.bn_gamma = Tensor(np.ones(in_dim), requires_grad=True, name="head.bn.gamma")
        self.bn_beta = Tensor(np.zeros(in_dim), requires_grad=True, name="head.bn.beta")
        self.bn_mean = np.zeros(in_dim)
        self.bn_var = np.ones(in_dim)
        self.W1 = Tensor(rng.uniform(-k1, k1, (in_dim, width)), requires_grad=True, name="head.W1")
        self.b1 = Tensor(np.zeros(width), requires_grad=True, name="head.b1")
        self.W2 = Tensor(rng.uniform(-k2, k2, (width, len(FitLabel))), requires_grad=True, name="head.W2")
        self.b2 = Tensor(np.zeros(len(FitLabel)), requires_grad=True, name="head.b2")
        self.training = False
        self.reseed(seed)

    def reseed(self, seed: int) -> None:
        self._rng = stream(seed, "dropout/head")

    def params(self) -> list[Tensor]:
        return [self.bn_gamma, self.bn_beta, self.W1, self.b1, self.W2, self.b2]

    def named_params(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.params()}

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters plus the batch-norm running statistics."""
        out = {k: v.data.copy() for k, v in self.named_params().items()}
        out["head.bn.running_mean"] = self.bn_mean.copy()
        out["head.bn.running_var"] = self.bn_var.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        targets = {k: p.data for k, p in self.named_params().items()}
        targets["head.bn.running_mean"] = self.bn_mean
        targets["head.bn.running_var"] = self.bn_var
        if set(state) != set(targets):
            raise DimensionError(f"head state keys {sorted(state)} != {sorted(targets)}")
        for k, arr in targets.items():
            if state[k].shape != arr.shape:
                raise DimensionError(f"{k}: shape {state[k].shape} != {arr.shape}")
            arr[...] = state[k]

    def __call__(self, pooled: Tensor) -> Tensor:
        if pooled.shape[-1] != self.in_dim:
            raise DimensionError(f"head expects {self.in_dim} pooled features, got {pooled.shape[-1]}")
        x = ag.batch_norm(pooled, self.bn_gamma, self.bn_beta, self.bn_mean, self.bn_var, self.training)
        h = ag.relu(ag.add(ag.matmul(x, self.W1), self.b1))
        h = ag.dropout(h, self.dropout, self._rng, self.training)
        return ag.add(ag.matmul(h, self.W2), self.b2)


def concat_pool(outputs: Tensor, last: Tensor, mask) -> Tensor:
    return ag.concat([last, ag.mean_over_time(outputs, mask), ag.max_over_time(outputs, mask)], axis=1)


def classifier_logits(lm: LanguageModel, head: ClassifierHead, ids, mask) -> Tensor:
    outputs, last, _ = lm.encode(ids, mask=mask)
    return head(concat_pool(outputs, last, mask))


def encode_for_classifier(text: str, vocab: Vocabulary, max_tokens: int = 400) -> list[int]:
    """EOS (document boundary, as seen in LM training) followed by at most ``max_tokens`` ids."""
    return [EOS] + encode(tokenize(text)[:max_tokens], vocab)


def pad_batch(docs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(d) for d in docs)
    ids = np.full((len(docs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(docs), width))
    for i, d in enumerate(docs):
        ids[i, :len(d)] = d
        mask[i, :len(d)] = 1.0
    return ids, mask


def predict_proba(lm: LanguageModel, head: ClassifierHead, docs: Sequence[Sequence[int]],
                  batch_size: int = 64) -> np.ndarray:
    """Class probabilities for classifier-encoded documents (evaluation mode)."""
    lm.eval()
    head.training = False
    out = np.zeros((len(docs), len(FitLabel)))
    with no_grad():
        for start in range(0, len(docs), batch_size):
            ids, mask = pad_batch(docs[start:start + batch_size])
            out[start:start + len(ids)] = ag.softmax(classifier_logits(lm, head, ids, mask).data)
    return out


def classify(lm: LanguageModel, head: ClassifierHead, vocab: Vocabulary, text: str,
             max_tokens: int = 400) -> tuple[FitLabel, np.ndarray]:
    probs = predict_proba(lm, head, [encode_for_classifier(text, vocab, max_tokens)])[0]
    return FitLabel(int(np.argmax(probs))), probs


def _set_trainable(groups, active) -> None:
    for k, params in enumerate(groups):
        for p in params:
            p.requires_grad = k in active


def _eval_loss(lm, head, docs, labels, batch_size) -> tuple[float, float]:
    probs = predict_proba(lm, head, docs, batch_size)
    y = np.asarray(labels)
    loss = float(-np.log(np.maximum(probs[np.arange(len(y)), y], 1e-300)).mean())
    return loss, float((probs.argmax(axis=1) == y).mean())


def train_classifier(lm: LanguageModel, head: ClassifierHead, train_docs, train_labels, val_docs, val_labels,
                     plan: FineTunePlan, on_epoch_end: Callable[[int, frozenset], None] | None = None):
    """Train head (and progressively the LM) on labelled, classifier-encoded docs in place.

    Returns the trace; ``lm`` and ``head`` end at the best validation-loss epoch.
    ``on_epoch_end(epoch, trainable_groups)`` runs after each epoch's updates.
    """
    if len(train_docs) != len(train_labels) or len(val_docs) != len(val_labels):
        raise DimensionError("documents and labels differ in length")
    if not train_docs or not val_docs:
        raise InputError("classifier training needs non-empty train and validation sets")
    if head.in_dim != 3 * lm.arch.hidden:
        raise DimensionError(f"head input {head.in_dim} does not match 3 x LM hidden {lm.arch.hidden}")
    groups = [head.params()] + lm.layer_groups(include_decoder=False)
    if plan.n_groups is not None and plan.n_groups != len(groups):
        raise DimensionError(f"plan expects {plan.n_groups} layer groups, model has {len(groups)}")
    y = np.asarray(train_labels, dtype=np.int64)
    n = len(train_docs)
    steps_per_epoch = math.ceil(n / plan.batch_size)
    scheds = plan.schedules(len(groups), plan.epochs * steps_per_epoch)
    lr_fn = _group_lr_fn(groups, scheds)
    unfreeze = UnfreezeSchedule(len(groups))
    all_params = [p for g in groups for p in g]
    opt = make_optimizer(plan.optimizer, all_params)
    rng = stream(plan.seed, "classifier-shuffle")
    lm.reseed(plan.seed)
    head.reseed(plan.seed)
    decoder_flags = [(p, p.requires_grad) for p in (lm.decoder_weight, lm.decoder_bias)]

    val_loss, val_acc = _eval_loss(lm, head, val_docs, val_labels, plan.batch_size)
    trace = [{"stage": "classifier", "epoch": 0, "train_loss": None, "val_loss": val_loss, "val_acc": val_acc,
              "trainable_groups": 0}]
    best = (val_loss, 0, lm.state_dict(), head.state_dict())
    stale, step = 0, 0
    try:
        for epoch in range(1, plan.epochs + 1):
            active = unfreeze.trainable(epoch) if plan.gradual_unfreeze else frozenset(range(len(groups)))
            _set_trainable(groups, active)
            # the decoder is unused here; a tied decoder weight is the embedding group
            if not lm.arch.tied:
                lm.decoder_weight.requires_grad = False
            lm.decoder_bias.requires_grad = False
            if plan.encoder_dropout:
                lm.train()
            else:
                lm.eval()
            head.training = True
            perm = rng.permutation(n)
            total = 0.0
            for start in range(0, n, plan.batch_size):
                idx = perm[start:start + plan.batch_size]
                ids, mask = pad_batch([train_docs[i] for i in idx])
                try:
                    logits = classifier_logits(lm, head, ids, mask)
                    loss = ag.softmax_cross_entropy(logits, y[idx])
                    total += loss.item() * len(idx)
                    ag.backward(loss)
                    ag.clip_grad_norm(all_params, plan.clip_norm)
                except NumericError as exc:
                    ag.current_tape().clear()
                    raise TrainingDivergedError(f"classifier: {exc} at epoch {epoch}", trace) from exc
                opt.step(lr_fn(step))
                opt.zero_grad()
                step += 1
            if on_epoch_end is not None:
                on_epoch_end(epoch, active)
            val_loss, val_acc = _eval_loss(lm, head, val_docs, val_labels, plan.batch_size)
            row = {"stage": "classifier", "epoch": epoch, "train_loss": total / n, "val_loss": val_loss,
                   "val_acc": val_acc, "trainable_groups": len(active)}
            trace.append(row)
            log.info("classifier epoch %d: %s", epoch, row)
            if not math.isfinite(val_loss):
                raise TrainingDivergedError(f"classifier: validation loss diverged at epoch {epoch}", trace)
            if val_loss < best[0]:
                best = (val_loss, epoch, lm.state_dict(), head.state_dict())
                stale = 0
            else:
                stale += 1
                if plan.patience is not None and stale >= plan.patience:
                    break
    finally:
        _set_trainable(groups, frozenset(range(len(groups))))
        for p, flag in decoder_flags:
            p.requires_grad = flag
    lm.load_state_dict(best[2])
    head.load_state_dict(best[3])
    lm.eval()
    head.training = False
    return trace
