"""LSTM next-word language model: training by truncated BPTT, perplexity, sampling."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .corpus import BOS, EOS, PAD, Vocabulary, encode
from .errors import DimensionError, InputError, NumericError, TrainingDivergedError
from .rng import stream

log = logging.getLogger(__name__)


@dataclass
class LmArch:
    vocab_size: int
    emb_dim: int = 256
    hidden: int = 256
    n_layers: int = 2
    dropout_emb: float = 0.1
    dropout_hidden: float = 0.2
    dropout_out: float = 0.2
    weight_drop: float = 0.2
    tie_weights: bool = True

    def __post_init__(self):
        if min(self.vocab_size, self.emb_dim, self.hidden, self.n_layers) < 1:
            raise InputError("language model dimensions must be positive")
        for p in (self.dropout_emb, self.dropout_hidden, self.dropout_out, self.weight_drop):
            if not 0.0 <= p < 1.0:
                raise InputError(f"dropout rates must lie in [0, 1), got {p}")

    @property
    def tied(self) -> bool:
        return self.tie_weights and self.emb_dim == self.hidden


@dataclass
class LmTrainConfig:
    lr: float = 0.02
    batch_size: int = 32
    epochs: int = 20
    bptt_len: int = 70
    clip_norm: float = 5.0
    seed: int = 0
    optimizer: str = "adam"
    patience: int | None = None

    def __post_init__(self):
        if not self.lr > 0 or self.batch_size < 1 or self.epochs < 0 or self.bptt_len < 1 or not self.clip_norm > 0:
            raise InputError(f"invalid language-model training config: {self}")
        if self.optimizer not in ("sgd", "adam"):
            raise InputError(f"unknown optimizer {self.optimizer!r}")


class LstmLayer:
    """One LSTM layer; gate blocks in W_ih/W_hh/b are ordered input, forget, cell, output."""

    def __init__(self, in_dim: int, hidden: int, weight_drop: float, rng: np.random.Generator, prefix: str):
        k = 1.0 / math.sqrt(hidden)
        self.hidden = hidden
        self.in_dim = in_dim
        self.weight_drop = weight_drop
        self.W_ih = Tensor(rng.uniform(-k, k, (4 * hidden, in_dim)), requires_grad=True, name=f"{prefix}.W_ih")
        self.W_hh = Tensor(rng.uniform(-k, k, (4 * hidden, hidden)), requires_grad=True, name=f"{prefix}.W_hh")
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.b = Tensor(b, requires_grad=True, name=f"{prefix}.b")

    def params(self) -> list[Tensor]:
        return [self.W_ih, self.W_hh, self.b]

    def __call__(self, x: Tensor, h0: np.ndarray, c0: np.ndarray, mask, training: bool,
                 rng: np.random.Generator) -> tuple[Tensor, Tensor, Tensor]:
        B, T, D = x.shape
        H = self.hidden
        W_hh = ag.dropout(self.W_hh, self.weight_drop, rng, training)
        proj = ag.matmul(ag.reshape(x, (B * T, D)), ag.transpose(self.W_ih))
        proj = ag.reshape(ag.add(proj, self.b), (B, T, 4 * H))
        W_hh_T = ag.transpose(W_hh)
        h, c = Tensor(h0), Tensor(c0)
        outs = []
        for t in range(T):
            gates = ag.add(ag.slice_(proj, (slice(None), t)), ag.matmul(h, W_hh_T))
            sig_if = ag.sigmoid(ag.slice_(gates, (slice(None), slice(0, 2 * H))))
            i = ag.slice_(sig_if, (slice(None), slice(0, H)))
            f = ag.slice_(sig_if, (slice(None), slice(H, 2 * H)))
            g = ag.tanh(ag.slice_(gates, (slice(None), slice(2 * H, 3 * H))))
            o = ag.sigmoid(ag.slice_(gates, (slice(None), slice(3 * H, 4 * H))))
            c_new = ag.add(ag.mul(f, c), ag.mul(i, g))
            h_new = ag.mul(o, ag.tanh(c_new))
            if mask is None:
                h, c = h_new, c_new
            else:
                m = mask[:, t:t + 1]
                h, c = ag.where(m, h_new, h), ag.where(m, c_new, c)
            outs.append(h)
        return ag.stack(outs, axis=1), h, c


class LanguageModel:
    """Embedding -> stacked LSTM -> vocabulary decoder, optionally weight-tied."""

    def __init__(self, arch: LmArch, seed: int = 0):
        self.arch = arch
        rng = stream(seed, "lm-init")
        V, E, H = arch.vocab_size, arch.emb_dim, arch.hidden
        self.embedding = Tensor(rng.uniform(-0.1, 0.1, (V, E)), requires_grad=True, name="embedding")
        self.layers = [LstmLayer(E if l == 0 else H, H, arch.weight_drop, rng, f"lstm{l}")
                       for l in range(arch.n_layers)]
        if arch.tied:
            self.decoder_weight = self.embedding
        else:
            k = 1.0 / math.sqrt(H)
            self.decoder_weight = Tensor(rng.uniform(-k, k, (V, H)), requires_grad=True, name="decoder.weight")
        self.decoder_bias = Tensor(np.zeros(V), requires_grad=True, name="decoder.bias")
        self.training = False
        self.reseed(seed)

    # -- bookkeeping --------------------------------------------------------
    def reseed(self, seed: int) -> None:
        """Reset the dropout streams (one per dropout site)."""
        self._rng = {"emb": stream(seed, "dropout/emb"), "out": stream(seed, "dropout/out")}
        for l in range(self.arch.n_layers):
            self._rng[f"hidden{l}"] = stream(seed, f"dropout/hidden{l}")
            self._rng[f"wd{l}"] = stream(seed, f"weightdrop/{l}")

    def train(self) -> "LanguageModel":
        self.training = True
        return self

    def eval(self) -> "LanguageModel":
        self.training = False
        return self

    def named_params(self) -> dict[str, Tensor]:
        out = {"embedding": self.embedding}
        for layer in self.layers:
            for p in layer.params():
                out[p.name] = p
        if not self.arch.tied:
            out["decoder.weight"] = self.decoder_weight
        out["decoder.bias"] = self.decoder_bias
        return out

    def params(self) -> list[Tensor]:
        return list(self.named_params().values())

    def layer_groups(self, include_decoder: bool = True) -> list[list[Tensor]]:
        """Parameter groups from the output side to the input side.

        The decoder travels with the top LSTM layer; the embedding is last.
        """
        groups = [layer.params() for layer in reversed(self.layers)]
        if include_decoder:
            groups[0] = groups[0] + ([] if self.arch.tied else [self.decoder_weight]) + [self.decoder_bias]
        return groups + [[self.embedding]]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_params().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_params()
        if set(state) != set(params):
            raise DimensionError(f"state keys {sorted(state)} != model keys {sorted(params)}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise DimensionError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data[...] = state[k]

    def init_state(self, batch: int) -> list[tuple[np.ndarray, np.ndarray]]:
        H = self.arch.hidden
        return [(np.zeros((batch, H)), np.zeros((batch, H))) for _ in self.layers]

    # -- forward ------------------------------------------------------------
    def encode(self, ids, state=None, mask=None):
        """Run the LSTM stack; return top-layer outputs (B, T, H), last top hidden, new state."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise DimensionError(f"expected (batch, time) indices, got shape {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.arch.vocab_size):
            raise DimensionError(f"token index out of range for vocabulary of {self.arch.vocab_size}")
        if state is None:
            state = self.init_state(ids.shape[0])
        a = self.arch
        x = ag.embedding_lookup(self.embedding, ids)
        x = ag.dropout(x, a.dropout_emb, self._rng["emb"], self.training)
        new_state = []
        last_h = None
        for l, layer in enumerate(self.layers):
            h0, c0 = state[l]
            x, last_h, c = layer(x, h0, c0, mask, self.training, self._rng[f"wd{l}"])
            new_state.append((last_h.data.copy(), c.data.copy()))
            if l < len(self.layers) - 1:
                x = ag.dropout(x, a.dropout_hidden, self._rng[f"hidden{l}"], self.training)
        x = ag.dropout(x, a.dropout_out, self._rng["out"], self.training)
        return x, last_h, new_state

    def forward(self, ids, state=None):
        """Next-token logits of shape (B, T, V) and the carried state."""
        out, _, new_state = self.encode(ids, state)
        B, T, H = out.shape
        logits = ag.matmul(ag.reshape(out, (B * T, H)), ag.transpose(self.decoder_weight))
        logits = ag.add(logits, self.decoder_bias)
        return ag.reshape(logits, (B, T, self.arch.vocab_size)), new_state

    __call__ = forward


def lm_loss(model: LanguageModel, inputs, targets, state=None, reduction: str = "mean"):
    """Cross-entropy of next-token predictions; PAD targets are excluded."""
    logits, new_state = model.forward(inputs, state)
    return ag.softmax_cross_entropy(logits, targets, ignore_index=PAD, reduction=reduction), new_state


# ---------------------------------------------------------------------------
# streams and batching

def make_stream(docs: Sequence[Sequence[int]]) -> np.ndarray:
    """Concatenate documents, each followed by EOS."""
    out: list[int] = []
    for d in docs:
        out.extend(d)
        out.append(EOS)
    return np.asarray(out, dtype=np.int64)


def batchify(tokens: np.ndarray, batch_size: int) -> np.ndarray:
    """Cut a stream into ``batch_size`` contiguous rows, PAD-filling the ragged tail."""
    n = len(tokens)
    rows = min(batch_size, max(1, n // 2))
    width = math.ceil(n / rows)
    out = np.full(rows * width, PAD, dtype=np.int64)
    out[:n] = tokens
    return out.reshape(rows, width)


def bptt_windows(data: np.ndarray, bptt: int):
    """Yield (inputs, targets) windows; targets are inputs shifted by one step."""
    width = data.shape[1]
    for i in range(0, width - 1, bptt):
        seq = min(bptt, width - 1 - i)
        x, y = data[:, i:i + seq], data[:, i + 1:i + 1 + seq]
        if np.any(y != PAD):
            yield x, y


def stream_nll(model: LanguageModel, tokens: np.ndarray, batch_size: int = 32, bptt: int = 70) -> tuple[float, int]:
    """Total next-token negative log-likelihood over a stream and the number of scored tokens."""
    if len(tokens) < 2:
        raise InputError("need at least two tokens to score a stream")
    data = batchify(tokens, batch_size)
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    state = model.init_state(data.shape[0])
    with no_grad():
        for x, y in bptt_windows(data, bptt):
            loss, state = lm_loss(model, x, y, state, reduction="sum")
            total += loss.item()
            count += int((y != PAD).sum())
    model.training = was_training
    return total, count


def perplexity(model: LanguageModel, tokens, batch_size: int = 32, bptt: int = 70) -> float:
    """exp of the mean next-token NLL; PAD targets are not counted."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        raise InputError("cannot compute perplexity of an empty stream")
    total, count = stream_nll(model, tokens, batch_size, bptt)
    return math.exp(total / count)


# ---------------------------------------------------------------------------
# training

LrFn = Callable[[int], "float | dict[int, float]"]


def make_optimizer(name: str, params: Sequence[Tensor]):
    return ag.Adam(params) if name == "adam" else ag.SGD(params)


def train_lm_epochs(model: LanguageModel, train_tokens: np.ndarray, val_tokens: np.ndarray, *,
                    epochs: int, batch_size: int, bptt: int, clip_norm: float, lr_fn: LrFn,
                    optimizer, patience: int | None = None, seed: int = 0, stage: str = "lm",
                    epoch_hook: Callable[[int], None] | None = None):
    """Shared truncated-BPTT loop; returns (trace, best_epoch). Restores the best-val parameters."""
    data = batchify(train_tokens, batch_size)
    model.reseed(seed)
    val_ppl = perplexity(model, val_tokens, batch_size, bptt)
    trace = [{"stage": stage, "epoch": 0, "train_loss": None, "val_ppl": val_ppl}]
    best_ppl, best_epoch, best_state = val_ppl, 0, model.state_dict()
    stale = 0
    step = 0
    params = model.params()
    for epoch in range(1, epochs + 1):
        if epoch_hook is not None:
            epoch_hook(epoch)
        model.train()
        state = model.init_state(data.shape[0])
        total, count = 0.0, 0
        for x, y in bptt_windows(data, bptt):
            try:
                loss, state = lm_loss(model, x, y, state)
            except NumericError as exc:
                raise TrainingDivergedError(f"{stage}: {exc} at epoch {epoch}", trace) from exc
            n = int((y != PAD).sum())
            total += loss.item() * n
            count += n
            ag.backward(loss)
            try:
                ag.clip_grad_norm(params, clip_norm)
            except NumericError as exc:
                raise TrainingDivergedError(f"{stage}: {exc} at epoch {epoch}", trace) from exc
            optimizer.step(lr_fn(step))
            optimizer.zero_grad()
            step += 1
        model.eval()
        val_ppl = perplexity(model, val_tokens, batch_size, bptt)
        row = {"stage": stage, "epoch": epoch, "train_loss": total / max(count, 1), "val_ppl": val_ppl}
        trace.append(row)
        log.info("%s epoch %d: train_loss=%.4f val_ppl=%.3f", stage, epoch, row["train_loss"], val_ppl)
        if not math.isfinite(val_ppl):
            raise TrainingDivergedError(f"{stage}: validation perplexity diverged at epoch {epoch}", trace)
        if val_ppl < best_ppl:
            best_ppl, best_epoch, best_state = val_ppl, epoch, model.state_dict()
            stale = 0
        else:
            stale += 1
            if patience is not None and stale >= patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return trace, best_epoch


def pretrain_lm(train_docs: Sequence[Sequence[int]], val_docs: Sequence[Sequence[int]], arch: LmArch,
                cfg: LmTrainConfig, model: LanguageModel | None = None):
    """Train a language model from scratch on encoded documents.

    Returns ``(model, trace)``; the model holds the best validation-perplexity
    parameters and the trace starts with the untrained (epoch 0) perplexity.
    """
    train_tokens, val_tokens = make_stream(train_docs), make_stream(val_docs)
    if len(train_tokens) < 2 or len(val_tokens) < 2:
        raise InputError("language-model training needs non-empty train and validation text")
    model = model or LanguageModel(arch, seed=cfg.seed)
    opt = make_optimizer(cfg.optimizer, model.params())
    trace, _ = train_lm_epochs(model, train_tokens, val_tokens, epochs=cfg.epochs, batch_size=cfg.batch_size,
                               bptt=cfg.bptt_len, clip_norm=cfg.clip_norm, lr_fn=lambda step: cfg.lr,
                               optimizer=opt, patience=cfg.patience, seed=cfg.seed, stage="pretrain")
    return model, trace


# ---------------------------------------------------------------------------
# generation

def next_token_distribution(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Sampling distribution over the vocabulary; PAD and BOS are never produced."""
    z = np.array(logits, dtype=np.float64)
    z[PAD] = -np.inf
    z[BOS] = -np.inf
    if temperature == 0:
        p = np.zeros_like(z)
        p[int(np.argmax(z))] = 1.0
        return p
    return ag.softmax(z / temperature)


def generate(model: LanguageModel, vocab: Vocabulary, seed_words: Sequence[str], max_len: int,
             temperature: float = 1.0, rng_seed: int = 0) -> list[str]:
    """Continue ``seed_words`` by sampling until EOS or ``max_len`` new tokens.

    ``temperature == 0`` means greedy decoding. The seed words are returned
    unchanged at the front of the result.
    """
    if temperature < 0:
        raise InputError(f"temperature must be >= 0, got {temperature}")
    if len(vocab) != model.arch.vocab_size:
        raise DimensionError(f"vocabulary size {len(vocab)} != model vocabulary {model.arch.vocab_size}")
    model.eval()
    rng = stream(rng_seed, "generate")
    ids = [EOS] + encode(seed_words, vocab)
    out = list(seed_words)
    with no_grad():
        logits, state = model.forward(np.asarray([ids]), model.init_state(1))
        last = logits.data[0, -1]
        for _ in range(max_len):
            p = next_token_distribution(last, temperature)
            if temperature == 0:
                nxt = int(np.argmax(p))
            else:
                cdf = np.cumsum(p)
                nxt = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
                nxt = min(nxt, len(p) - 1)
            if nxt == EOS:
                break
            out.append(vocab.tokens[nxt])
            logits, state = model.forward(np.asarray([[nxt]]), state)
            last = logits.data[0, -1]
    return out


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


def arch_dict(arch: LmArch) -> dict:
    return asdict(arch)
