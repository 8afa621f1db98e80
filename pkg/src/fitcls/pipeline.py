"""End-to-end training and prediction for the three classifier families."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint
from .config import Config
from .corpus import Review, SplitDataset, Vocabulary, build_vocabulary, encode, tokenize
from .errors import ArtifactMismatchError, CheckpointStructureError, InputError, VocabMismatchError
from .features import EmbeddingTable, TfidfModel, fit_tfidf, load_embeddings, mean_pool_matrix, tfidf_matrix
from .finetune import ClassifierHead, encode_for_classifier, finetune_lm, predict_proba, train_classifier
from .langmodel import LanguageModel, LmArch, perplexity, make_stream, pretrain_lm
from .linear import LinearClassifier, train_linear

log = logging.getLogger(__name__)

METHODS = ("tfidf", "embed-mean", "ulmfit")
_KIND = {"tfidf": "tfidf-linear", "embed-mean": "embed-mean-linear", "ulmfit": "ulmfit"}
LM_KIND = "language-model"


def data_vocabulary(ds: SplitDataset, cfg: Config) -> Vocabulary:
    """The vocabulary a model trained on ``ds`` under ``cfg`` would use."""
    return build_vocabulary(ds.train, cfg.vocab.min_freq, cfg.vocab.max_size)


def encode_docs(reviews: Sequence[Review], vocab: Vocabulary) -> list[list[int]]:
    return [encode(tokenize(r.text), vocab) for r in reviews]


def labels_of(reviews: Sequence[Review]) -> np.ndarray:
    return np.array([int(r.label) for r in reviews], dtype=np.int64)


@dataclass
class TrainedModel:
    """A fitted classifier plus everything needed to featurize raw text."""

    method: str
    vocab: Vocabulary
    config: dict
    linear: LinearClassifier | None = None
    tfidf: TfidfModel | None = None
    embeddings: EmbeddingTable | None = None
    lm: LanguageModel | None = None
    head: ClassifierHead | None = None
    max_tokens: int = 400

    def features(self, reviews: Sequence[Review]):
        docs = encode_docs(reviews, self.vocab)
        if self.method == "tfidf":
            return tfidf_matrix(docs, self.tfidf)
        return mean_pool_matrix(docs, self.embeddings)

    def predict_proba(self, reviews: Sequence[Review]) -> np.ndarray:
        if self.method == "ulmfit":
            docs = [encode_for_classifier(r.text, self.vocab, self.max_tokens) for r in reviews]
            return predict_proba(self.lm, self.head, docs)
        logits = self.linear.predict_logits(self.features(reviews))
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, reviews: Sequence[Review]) -> np.ndarray:
        if not reviews:
            return np.zeros(0, dtype=np.int64)
        if self.method == "ulmfit":
            return self.predict_proba(reviews).argmax(axis=1)
        return self.linear.predict(self.features(reviews))

    # -- persistence --------------------------------------------------------
    def to_checkpoint(self) -> Checkpoint:
        arrays: dict[str, np.ndarray] = {}
        meta: dict = {"method": self.method}
        if self.method == "ulmfit":
            arrays.update({f"lm.{k}": v for k, v in self.lm.state_dict().items()})
            arrays.update(self.head.state_dict())
            meta.update(arch=asdict(self.lm.arch), head={"width": self.head.width, "dropout": self.head.dropout},
                        max_tokens=self.max_tokens)
        else:
            arrays.update({"linear.W": self.linear.W, "linear.b": self.linear.b})
            if self.method == "tfidf":
                arrays.update({"tfidf.idf": self.tfidf.idf, "tfidf.df": self.tfidf.df.astype(np.float64)})
                meta.update(doc_count=self.tfidf.doc_count, sublinear_tf=self.tfidf.sublinear_tf)
            else:
                arrays["embeddings"] = self.embeddings.matrix
                meta.update(coverage=self.embeddings.coverage)
        return Checkpoint(kind=_KIND[self.method], arrays=arrays, vocab=self.vocab, config=self.config, meta=meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "TrainedModel":
        method = ckpt.meta.get("method")
        if method not in METHODS or _KIND[method] != ckpt.kind:
            raise ArtifactMismatchError(f"checkpoint of kind {ckpt.kind!r} is not a classifier")
        if ckpt.vocab is None:
            raise CheckpointStructureError("classifier checkpoint carries no vocabulary")
        a, m = ckpt.arrays, ckpt.meta
        model = cls(method=method, vocab=ckpt.vocab, config=ckpt.config)
        try:
            if method == "ulmfit":
                model.lm = LanguageModel(LmArch(**m["arch"]))
                model.lm.load_state_dict({k[3:]: v for k, v in a.items() if k.startswith("lm.")})
                model.head = ClassifierHead(model.lm.arch.hidden, **m["head"])
                model.head.load_state_dict({k: v for k, v in a.items() if k.startswith("head.")})
                model.max_tokens = int(m["max_tokens"])
            else:
                model.linear = LinearClassifier(a["linear.W"], a["linear.b"],
                                                "tfidf" if method == "tfidf" else "mean_embedding")
                if method == "tfidf":
                    model.tfidf = TfidfModel(a["tfidf.idf"], a["tfidf.df"].astype(np.int64),
                                             int(m["doc_count"]), bool(m["sublinear_tf"]))
                else:
                    model.embeddings = EmbeddingTable(a["embeddings"], float(m["coverage"]))
        except (KeyError, TypeError, InputError) as exc:
            raise CheckpointStructureError(f"checkpoint does not describe a {method} model: {exc}") from None
        return model


def lm_checkpoint(lm: LanguageModel, vocab: Vocabulary, config: dict, stage: str) -> Checkpoint:
    return Checkpoint(kind=LM_KIND, arrays=lm.state_dict(), vocab=vocab, config=config,
                      meta={"arch": asdict(lm.arch), "stage": stage})


def lm_from_checkpoint(ckpt: Checkpoint) -> tuple[LanguageModel, Vocabulary]:
    """Language model from either an LM checkpoint or a ULMFit classifier checkpoint."""
    if ckpt.kind == _KIND["ulmfit"]:
        model = TrainedModel.from_checkpoint(ckpt)
        return model.lm, model.vocab
    if ckpt.kind != LM_KIND:
        raise ArtifactMismatchError(f"checkpoint of kind {ckpt.kind!r} holds no language model")
    if ckpt.vocab is None:
        raise CheckpointStructureError("language-model checkpoint carries no vocabulary")
    try:
        lm = LanguageModel(LmArch(**ckpt.meta["arch"]))
        lm.load_state_dict(ckpt.arrays)
    except (KeyError, TypeError, InputError) as exc:
        raise CheckpointStructureError(f"invalid language-model checkpoint: {exc}") from None
    return lm, ckpt.vocab


@dataclass
class TrainOutcome:
    model: TrainedModel
    trace: list[dict]
    language_models: dict[str, LanguageModel] = field(default_factory=dict)
    perplexities: dict[str, float] = field(default_factory=dict)


def _linear_outcome(method: str, ds: SplitDataset, cfg: Config, vocab: Vocabulary, X_train, X_val,
                    **parts) -> TrainOutcome:
    kind = "tfidf" if method == "tfidf" else "mean_embedding"
    result = train_linear(X_train, labels_of(ds.train), X_val, labels_of(ds.validation), cfg.linear, kind)
    model = TrainedModel(method=method, vocab=vocab, config=cfg.to_dict(), linear=result.model, **parts)
    return TrainOutcome(model=model, trace=[{"stage": "linear", **row} for row in result.trace])


def train_tfidf(ds: SplitDataset, cfg: Config) -> TrainOutcome:
    vocab = data_vocabulary(ds, cfg)
    train_docs = encode_docs(ds.train, vocab)
    tfidf = fit_tfidf(train_docs, len(vocab), cfg.tfidf.sublinear_tf, cfg.tfidf.max_df)
    return _linear_outcome("tfidf", ds, cfg, vocab, tfidf_matrix(train_docs, tfidf),
                           tfidf_matrix(encode_docs(ds.validation, vocab), tfidf), tfidf=tfidf)


def train_embed_mean(ds: SplitDataset, cfg: Config, embeddings_path=None) -> TrainOutcome:
    path = embeddings_path or cfg.embeddings.path
    if path is None:
        raise InputError("embed-mean needs an embedding file (--embeddings or embeddings.path)")
    if not Path(path).is_file():
        raise InputError(f"embedding file not found: {path}")
    vocab = data_vocabulary(ds, cfg)
    table = load_embeddings(path, vocab, cfg.embeddings.d)
    log.info("embedding coverage %.4f", table.coverage)
    return _linear_outcome("embed-mean", ds, cfg, vocab, mean_pool_matrix(encode_docs(ds.train, vocab), table),
                           mean_pool_matrix(encode_docs(ds.validation, vocab), table), embeddings=table)


def train_ulmfit(ds: SplitDataset, cfg: Config, pretrained: LanguageModel | None = None,
                 pretrained_vocab: Vocabulary | None = None) -> TrainOutcome:
    """Pretrain (unless given an LM), fine-tune the LM on review text, then train the classifier."""
    vocab = data_vocabulary(ds, cfg)
    if pretrained is not None and pretrained_vocab is not None and pretrained_vocab.hash != vocab.hash:
        raise VocabMismatchError("the supplied language model was trained with a different vocabulary")
    train_docs, val_docs = encode_docs(ds.train, vocab), encode_docs(ds.validation, vocab)
    trace: list[dict] = []
    if pretrained is None:
        pretrained, pre_trace = pretrain_lm(train_docs, val_docs, cfg.lm_arch.build(len(vocab)), cfg.lm)
        trace += pre_trace
    val_stream = make_stream(val_docs)
    ppl = {"pretrained": perplexity(pretrained, val_stream, cfg.lm.batch_size, cfg.lm.bptt_len)}
    tuned, ft_trace = finetune_lm(pretrained, train_docs, val_docs, cfg.finetune)
    trace += ft_trace
    ppl["finetuned"] = perplexity(tuned, val_stream, cfg.lm.batch_size, cfg.lm.bptt_len)

    plan = cfg.classifier
    head = ClassifierHead(tuned.arch.hidden, cfg.head.width, cfg.head.dropout, seed=plan.seed)
    clf_lm = LanguageModel(tuned.arch, seed=plan.seed)
    clf_lm.load_state_dict(tuned.state_dict())
    enc = lambda rs: [encode_for_classifier(r.text, vocab, plan.max_tokens) for r in rs]
    trace += train_classifier(clf_lm, head, enc(ds.train), labels_of(ds.train), enc(ds.validation),
                              labels_of(ds.validation), plan)
    model = TrainedModel(method="ulmfit", vocab=vocab, config=cfg.to_dict(), lm=clf_lm, head=head,
                         max_tokens=plan.max_tokens)
    return TrainOutcome(model=model, trace=trace, perplexities=ppl,
                        language_models={"pretrained": pretrained, "finetuned": tuned})


def train_method(method: str, ds: SplitDataset, cfg: Config, *, embeddings_path=None,
                 pretrained: LanguageModel | None = None, pretrained_vocab: Vocabulary | None = None) -> TrainOutcome:
    if method == "tfidf":
        return train_tfidf(ds, cfg)
    if method == "embed-mean":
        return train_embed_mean(ds, cfg, embeddings_path)
    if method == "ulmfit":
        return train_ulmfit(ds, cfg, pretrained, pretrained_vocab)
    raise InputError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
