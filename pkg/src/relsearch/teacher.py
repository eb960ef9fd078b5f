"""Joint query+pin relevance teacher.

A desk-scale cross-encoder: token and segment embedding tables, mean
pooling over the joint sequence, and a two-layer head emitting five logits.
Mean pooling over summed token+segment embeddings stands in for a
transformer's sentence embedding while keeping every gradient
hand-derivable; the joint sequence and shared tables preserve the
cross-encoder shape (query-pin interactions happen inside the head).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .corpus import NUM_LEVELS, PinDocument, QueryRecord, SoftLabel
from .evalmetrics import EvalReport, ScoredExample, build_report
from . import neuralcore as nc
from .textrep import (
    TextRepConfig,
    TokenSeq,
    Vocabulary,
    assemble_pin_text,
    build_crossencoder_input,
    impute_title_description,
    tokenize,
)

logger = logging.getLogger(__name__)


class TeacherError(ValueError):
    pass


TrainingDiverged = nc.TrainingDiverged


@dataclass(frozen=True)
class TeacherConfig:
    d_model: int = 64
    hidden: int = 128


@dataclass
class CrossEncoderModel:
    params: nc.Params
    config: TeacherConfig
    vocab_size: int


@dataclass(frozen=True)
class TeacherTrainConfig:
    epochs: int = 12
    batch_size: int = 256
    seed: int = 7
    max_len: int = 96
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 3
    model: TeacherConfig = field(default_factory=TeacherConfig)

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise TeacherError("epochs, batch_size and patience must be positive")


class TeacherScorer(Protocol):
    def score(self, query_text: str, pin: PinDocument) -> SoftLabel: ...


def init_teacher(vocab_size: int, config: TeacherConfig, seed: int) -> CrossEncoderModel:
    """Seeded uniform Glorot init; embedding tables use fan_in = fan_out = d."""
    rng = np.random.default_rng(seed)
    d, h = config.d_model, config.hidden
    params: nc.Params = {
        "token_emb": nc.glorot_uniform(rng, vocab_size, d),
        "seg_emb": nc.glorot_uniform(rng, 2, d),
        "head1_w": nc.glorot_uniform(rng, h, d),
        "head1_b": np.zeros(h),
        "head2_w": nc.glorot_uniform(rng, NUM_LEVELS, h),
        "head2_b": np.zeros(NUM_LEVELS),
    }
    return CrossEncoderModel(params=params, config=config, vocab_size=vocab_size)


def _flatten_batch(
    token_arrays: Sequence[np.ndarray], segment_arrays: Sequence[np.ndarray]
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    lengths = np.array([len(t) for t in token_arrays], dtype=np.int64)
    if np.any(lengths == 0):
        raise TeacherError("cannot encode an empty token sequence")
    flat_tokens = np.concatenate(token_arrays)
    flat_segments = np.concatenate(segment_arrays)
    starts = np.concatenate(([0], np.cumsum(lengths)[:-1]))
    return flat_tokens, flat_segments, lengths, starts


def _forward_pooled(params: nc.Params, flat_tokens, flat_segments, lengths, starts):
    rows = params["token_emb"][flat_tokens] + params["seg_emb"][flat_segments]
    pooled = np.add.reduceat(rows, starts, axis=0) / lengths[:, None]
    h1 = pooled @ params["head1_w"].T + params["head1_b"]
    a1 = np.maximum(h1, 0.0)
    logits = a1 @ params["head2_w"].T + params["head2_b"]
    return pooled, h1, a1, logits


def teacher_forward_batch(model: CrossEncoderModel, seqs: Sequence[TokenSeq]) -> np.ndarray:
    """Probabilities [n, 5] for a batch of joint sequences."""
    token_arrays = [np.asarray(s.tokens, dtype=np.int64) for s in seqs]
    segment_arrays = [np.asarray(s.segment_ids, dtype=np.int64) for s in seqs]
    flat_t, flat_s, lengths, starts = _flatten_batch(token_arrays, segment_arrays)
    if flat_t.size and int(flat_t.max()) >= model.vocab_size:
        raise TeacherError("token id outside vocabulary")
    _, _, _, logits = _forward_pooled(model.params, flat_t, flat_s, lengths, starts)
    return nc.softmax(logits)


def teacher_forward(model: CrossEncoderModel, seq: TokenSeq) -> SoftLabel:
    """Mean-pool token+segment embeddings, apply the head, softmax to 5 levels."""
    if len(seq) == 0:
        raise TeacherError("cannot score an empty sequence")
    probs = teacher_forward_batch(model, [seq])[0]
    return SoftLabel(tuple(float(p) for p in probs))


def _loss_and_grads(
    params: nc.Params,
    flat_t: np.ndarray,
    flat_s: np.ndarray,
    lengths: np.ndarray,
    starts: np.ndarray,
    targets: np.ndarray,
) -> tuple[float, nc.Params]:
    pooled, h1, a1, logits = _forward_pooled(params, flat_t, flat_s, lengths, starts)
    loss, dlogits = nc.softmax_xent(logits, targets)

    da1 = dlogits @ params["head2_w"]
    dW2 = dlogits.T @ a1
    db2 = dlogits.sum(axis=0)
    dh1 = da1 * (h1 > 0.0)
    dW1 = dh1.T @ pooled
    db1 = dh1.sum(axis=0)
    dpooled = dh1 @ params["head1_w"]

    drows = np.repeat(dpooled / lengths[:, None], lengths, axis=0)
    dE = np.zeros_like(params["token_emb"])
    np.add.at(dE, flat_t, drows)
    dS = np.zeros_like(params["seg_emb"])
    np.add.at(dS, flat_s, drows)

    grads: nc.Params = {
        "token_emb": dE,
        "seg_emb": dS,
        "head1_w": dW1,
        "head1_b": db1,
        "head2_w": dW2,
        "head2_b": db2,
    }
    return loss, grads


def teacher_loss_and_grads(
    model: CrossEncoderModel, seqs: Sequence[TokenSeq], labels: Sequence[SoftLabel]
) -> tuple[float, nc.Params]:
    """Mean cross-entropy over the batch and gradients for every parameter."""
    token_arrays = [np.asarray(s.tokens, dtype=np.int64) for s in seqs]
    segment_arrays = [np.asarray(s.segment_ids, dtype=np.int64) for s in seqs]
    flat_t, flat_s, lengths, starts = _flatten_batch(token_arrays, segment_arrays)
    targets = np.array([l.probs for l in labels], dtype=np.float64)
    return _loss_and_grads(model.params, flat_t, flat_s, lengths, starts, targets)


def _dataset_arrays(dataset: Sequence[tuple[TokenSeq, SoftLabel]]):
    tokens = [np.asarray(seq.tokens, dtype=np.int64) for seq, _ in dataset]
    segments = [np.asarray(seq.segment_ids, dtype=np.int64) for seq, _ in dataset]
    labels = np.array([label.probs for _, label in dataset], dtype=np.float64)
    return tokens, segments, labels


def _batch_accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == np.argmax(labels, axis=1)))


def train_teacher(
    train_set: Sequence[tuple[TokenSeq, SoftLabel]],
    valid_set: Sequence[tuple[TokenSeq, SoftLabel]],
    config: TeacherTrainConfig,
    vocab_size: int | None = None,
) -> tuple[CrossEncoderModel, list[dict]]:
    """Minibatch Adam on soft-target cross-entropy.

    Returns the best-on-validation checkpoint and the per-epoch history.
    Early-stops after config.patience epochs without a validation accuracy
    improvement; with an empty validation set the final model is returned.
    """
    if not train_set:
        raise TeacherError("training set is empty")
    if vocab_size is None:
        vocab_size = 1 + max(
            max(seq.tokens) for seq, _ in list(train_set) + list(valid_set)
        )
    model = init_teacher(vocab_size, config.model, config.seed)
    state = nc.AdamState.for_params(
        model.params, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps
    )
    rng = np.random.default_rng(config.seed + 1)

    tokens, segments, labels = _dataset_arrays(train_set)
    v_tokens, v_segments, v_labels = _dataset_arrays(valid_set) if valid_set else ([], [], None)

    history: list[dict] = []
    best_params: nc.Params | None = None
    best_accuracy = -1.0
    epochs_since_best = 0
    n = len(train_set)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for batch_index, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            b_tokens = [tokens[i] for i in idx]
            b_segments = [segments[i] for i in idx]
            flat_t, flat_s, lengths, starts = _flatten_batch(b_tokens, b_segments)
            try:
                loss, grads = _loss_and_grads(
                    model.params, flat_t, flat_s, lengths, starts, labels[idx]
                )
            except nc.NonFiniteError as exc:
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} batch {batch_index}",
                    batch_index,
                    nc.param_norms(model.params),
                ) from exc
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} batch {batch_index}",
                    batch_index,
                    nc.param_norms(model.params),
                )
            nc.adam_step(model.params, grads, state)
            epoch_loss += loss * len(idx)
        epoch_loss /= n

        entry = {"epoch": epoch, "train_loss": epoch_loss}
        if valid_set:
            valid_probs = _predict_probs(model.params, v_tokens, v_segments)
            entry["valid_accuracy"] = _batch_accuracy(valid_probs, v_labels)
            if entry["valid_accuracy"] > best_accuracy:
                best_accuracy = entry["valid_accuracy"]
                best_params = nc.clone_params(model.params)
                epochs_since_best = 0
            else:
                epochs_since_best += 1
        history.append(entry)
        logger.info("teacher epoch %d: %s", epoch, entry)
        if valid_set and epochs_since_best >= config.patience:
            break

    if best_params is not None:
        model.params = best_params
    return model, history


def _predict_probs(params: nc.Params, tokens, segments, batch_size: int = 1024) -> np.ndarray:
    out = []
    for start in range(0, len(tokens), batch_size):
        flat_t, flat_s, lengths, starts = _flatten_batch(
            tokens[start : start + batch_size], segments[start : start + batch_size]
        )
        _, _, _, logits = _forward_pooled(params, flat_t, flat_s, lengths, starts)
        out.append(nc.softmax(logits))
    return np.concatenate(out, axis=0)


def predict_distribution(
    model: CrossEncoderModel,
    query: QueryRecord,
    pin: PinDocument,
    vocab: Vocabulary,
    config: TextRepConfig,
) -> SoftLabel:
    """tokenize -> impute -> assemble -> joint input -> forward."""
    query_ids = vocab.encode(tokenize(query.text))
    pin_ids = assemble_pin_text(impute_title_description(pin), vocab, config)
    seq = build_crossencoder_input(query_ids, pin_ids, config.max_len)
    return teacher_forward(model, seq)


@dataclass
class CrossEncoderScorer:
    """TeacherScorer backed by a trained cross-encoder checkpoint."""

    model: CrossEncoderModel
    vocab: Vocabulary
    text_config: TextRepConfig

    def score(self, query_text: str, pin: PinDocument) -> SoftLabel:
        query = QueryRecord(query_id="", text=query_text or " ")
        return predict_distribution(self.model, query, pin, self.vocab, self.text_config)

    def score_many(
        self, query_texts: Sequence[str], pins: Sequence[PinDocument]
    ) -> list[SoftLabel]:
        """Batched scoring; matches score() pair by pair to float round-off
        (BLAS kernels differ across batch shapes at the last ulp)."""
        query_cache: dict[str, list[int]] = {}
        pin_cache: dict[int, list[int]] = {}
        seqs = []
        for text, pin in zip(query_texts, pins):
            q_ids = query_cache.get(text)
            if q_ids is None:
                q_ids = self.vocab.encode(tokenize(text))
                query_cache[text] = q_ids
            p_ids = pin_cache.get(id(pin))
            if p_ids is None:
                p_ids = assemble_pin_text(
                    impute_title_description(pin), self.vocab, self.text_config
                )
                pin_cache[id(pin)] = p_ids
            seqs.append(build_crossencoder_input(q_ids, p_ids, self.text_config.max_len))
        probs = []
        for start in range(0, len(seqs), 2048):
            probs.append(teacher_forward_batch(self.model, seqs[start : start + 2048]))
        stacked = np.concatenate(probs, axis=0) if probs else np.zeros((0, NUM_LEVELS))
        return [SoftLabel(tuple(float(p) for p in row)) for row in stacked]


def eval_teacher(
    model: CrossEncoderModel, test_set: Sequence[tuple[TokenSeq, SoftLabel]]
) -> EvalReport:
    tokens = [np.asarray(seq.tokens, dtype=np.int64) for seq, _ in test_set]
    segments = [np.asarray(seq.segment_ids, dtype=np.int64) for seq, _ in test_set]
    probs = _predict_probs(model.params, tokens, segments)
    scored = [
        ScoredExample(
            predicted=SoftLabel(tuple(float(p) for p in row)),
            true_label=label,
        )
        for row, (_, label) in zip(probs, test_set)
    ]
    return build_report(scored)


def build_teacher_dataset(
    examples,
    queries_by_id: dict[str, QueryRecord],
    pins_by_id: dict[str, PinDocument],
    vocab: Vocabulary,
    config: TextRepConfig,
) -> list[tuple[TokenSeq, SoftLabel]]:
    """Materialize (joint sequence, soft label) pairs for labeled examples."""
    query_ids_cache: dict[str, list[int]] = {}
    pin_ids_cache: dict[str, list[int]] = {}
    dataset = []
    for example in examples:
        if example.query_id not in queries_by_id:
            raise TeacherError(f"unknown query_id {example.query_id!r}")
        if example.pin_id not in pins_by_id:
            raise TeacherError(f"unknown pin_id {example.pin_id!r}")
        q_ids = query_ids_cache.get(example.query_id)
        if q_ids is None:
            q_ids = vocab.encode(tokenize(queries_by_id[example.query_id].text))
            query_ids_cache[example.query_id] = q_ids
        p_ids = pin_ids_cache.get(example.pin_id)
        if p_ids is None:
            p_ids = assemble_pin_text(
                impute_title_description(pins_by_id[example.pin_id]), vocab, config
            )
            pin_ids_cache[example.pin_id] = p_ids
        seq = build_crossencoder_input(q_ids, p_ids, config.max_len)
        dataset.append((seq, example.label))
    return dataset


def save_teacher(
    model: CrossEncoderModel,
    path: str | Path,
    vocab_hash: str = "",
    history: list[dict] | None = None,
) -> None:
    """Checkpoint plus sidecar JSON (vocab hash, config, metrics history)."""
    meta = {
        "kind": "teacher",
        "d_model": model.config.d_model,
        "hidden": model.config.hidden,
        "vocab_size": model.vocab_size,
        "vocab_hash": vocab_hash,
    }
    nc.save_checkpoint(path, model.params, meta)
    sidecar = {"vocab_hash": vocab_hash, "config": meta, "history": history or []}
    with open(f"{path}.sidecar.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_teacher(path: str | Path) -> CrossEncoderModel:
    params, meta = nc.load_checkpoint(path)
    if meta.get("kind") != "teacher":
        raise TeacherError(f"{path}: not a teacher checkpoint")
    config = TeacherConfig(d_model=int(meta["d_model"]), hidden=int(meta["hidden"]))
    model = CrossEncoderModel(params=params, config=config, vocab_size=int(meta["vocab_size"]))
    expected = {
        "token_emb": (model.vocab_size, config.d_model),
        "seg_emb": (2, config.d_model),
        "head1_w": (config.hidden, config.d_model),
        "head1_b": (config.hidden,),
        "head2_w": (NUM_LEVELS, config.hidden),
        "head2_b": (NUM_LEVELS,),
    }
    for name, shape in expected.items():
        if name not in params or params[name].shape != shape:
            raise TeacherError(f"{path}: parameter {name!r} has unexpected shape")
    return model
