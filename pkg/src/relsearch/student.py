"""Feature-based feed-forward student.

Inputs are precomputed features, not raw text: query/pin embeddings pass
through unchanged, each numerical feature is lifted to a small learned
vector (x * w + v), categorical attributes hit embedding tables with a
dedicated out-of-vocabulary row, and presence flags are appended raw. The
concatenation feeds a two-hidden-layer ReLU trunk with five output logits.

The trunk input width is fixed by a FeatureLayout; every batch and
checkpoint carries the layout hash so a student can never silently consume
features assembled under a different layout.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import NUM_LEVELS, SoftLabel
from .evalmetrics import EvalReport, ScoredExample, build_report
from .features import FeatureLayout, StudentFeatureVector
from . import neuralcore as nc

logger = logging.getLogger(__name__)

GAINS = np.array([0.0, 0.25, 0.5, 0.75, 1.0])


class StudentError(ValueError):
    pass


@dataclass(frozen=True)
class StudentConfig:
    hidden1: int = 256
    hidden2: int = 128


@dataclass
class StudentModel:
    params: nc.Params
    layout: FeatureLayout
    config: StudentConfig

    @property
    def layout_hash(self) -> str:
        return self.layout.layout_hash()


@dataclass(frozen=True)
class StudentTrainConfig:
    epochs: int = 15
    batch_size: int = 512
    seed: int = 11
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 3
    model: StudentConfig = field(default_factory=StudentConfig)

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise StudentError("epochs, batch_size and patience must be positive")


@dataclass
class FeatureBatch:
    """Dense arrays for a set of feature vectors, optionally with targets."""

    query_emb: np.ndarray
    pin_emb: np.ndarray
    numerical: np.ndarray
    cat_ids: np.ndarray
    flags: np.ndarray
    layout_hash: str
    targets: np.ndarray | None = None

    def __len__(self) -> int:
        return self.numerical.shape[0]

    @classmethod
    def from_pairs(
        cls,
        pairs: Iterable[tuple[StudentFeatureVector, SoftLabel | None]],
        layout: FeatureLayout,
    ) -> "FeatureBatch":
        """Stream (features, label) pairs into flat arrays.

        Accepts an iterable so large distilled sets never need a list of
        feature-vector objects held in memory alongside the arrays.
        """
        expected = layout.layout_hash()
        q_rows, p_rows, num_rows, cat_rows, flag_rows, target_rows = [], [], [], [], [], []
        have_targets = None
        for fv, label in pairs:
            if fv.layout_hash != expected:
                raise StudentError(
                    f"feature vector layout {fv.layout_hash} != batch layout {expected}"
                )
            q_rows.append(fv.query_embedding)
            p_rows.append(fv.pin_embedding)
            num_rows.append(
                np.concatenate((fv.bm25, fv.overlap, [fv.engagement_rate]))
            )
            cat_rows.append(fv.categorical_ids)
            flag_rows.append(fv.flags)
            if have_targets is None:
                have_targets = label is not None
            elif have_targets != (label is not None):
                raise StudentError("mixed labeled and unlabeled pairs in one batch")
            if label is not None:
                target_rows.append(label.probs)
        n = len(num_rows)
        n_cat = len(layout.categorical)
        return cls(
            query_emb=np.array(q_rows, dtype=np.float64).reshape(n, layout.d_query_emb),
            pin_emb=np.array(p_rows, dtype=np.float64).reshape(n, layout.d_pin_emb),
            numerical=np.array(num_rows, dtype=np.float64).reshape(n, layout.n_numerical),
            cat_ids=np.array(cat_rows, dtype=np.int64).reshape(n, n_cat),
            flags=np.array(flag_rows, dtype=np.float64).reshape(n, len(layout.flag_names)),
            layout_hash=expected,
            targets=np.array(target_rows, dtype=np.float64) if target_rows else None,
        )

    def take(self, idx: np.ndarray) -> "FeatureBatch":
        return FeatureBatch(
            query_emb=self.query_emb[idx],
            pin_emb=self.pin_emb[idx],
            numerical=self.numerical[idx],
            cat_ids=self.cat_ids[idx],
            flags=self.flags[idx],
            layout_hash=self.layout_hash,
            targets=self.targets[idx] if self.targets is not None else None,
        )


def _cat_key(name: str) -> str:
    return f"cat:{name}"


def init_student(layout: FeatureLayout, config: StudentConfig, seed: int) -> StudentModel:
    """Seeded init; numerical lifts use fan-in 1, embedding tables fan d_cat."""
    rng = np.random.default_rng(seed)
    n_num, d_num = layout.n_numerical, layout.d_num
    params: nc.Params = {
        "num_w": rng.uniform(-1.0, 1.0, size=(n_num, d_num))
        * np.sqrt(6.0 / (1 + d_num)),
        "num_b": np.zeros((n_num, d_num)),
    }
    for name, values in layout.categorical:
        params[_cat_key(name)] = nc.glorot_uniform(
            rng, len(values) + 1, layout.d_cat
        )  # last row catches unseen values
    d_in = layout.input_dim
    params["fc1_w"] = nc.glorot_uniform(rng, config.hidden1, d_in)
    params["fc1_b"] = np.zeros(config.hidden1)
    params["fc2_w"] = nc.glorot_uniform(rng, config.hidden2, config.hidden1)
    params["fc2_b"] = np.zeros(config.hidden2)
    params["out_w"] = nc.glorot_uniform(rng, NUM_LEVELS, config.hidden2)
    params["out_b"] = np.zeros(NUM_LEVELS)
    return StudentModel(params=params, layout=layout, config=config)


def _check_hash(model: StudentModel, batch: FeatureBatch) -> None:
    if batch.layout_hash != model.layout_hash:
        raise StudentError(
            f"batch layout {batch.layout_hash} != model layout {model.layout_hash}"
        )


def _trunk_input(model: StudentModel, batch: FeatureBatch) -> np.ndarray:
    params, layout = model.params, model.layout
    n = len(batch)
    num_emb = batch.numerical[:, :, None] * params["num_w"][None] + params["num_b"][None]
    parts = [batch.query_emb, batch.pin_emb, num_emb.reshape(n, -1)]
    for j, (name, _) in enumerate(layout.categorical):
        parts.append(params[_cat_key(name)][batch.cat_ids[:, j]])
    parts.append(batch.flags)
    return np.concatenate(parts, axis=1)


def _forward(model: StudentModel, batch: FeatureBatch):
    params = model.params
    x = _trunk_input(model, batch)
    z1 = x @ params["fc1_w"].T + params["fc1_b"]
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ params["fc2_w"].T + params["fc2_b"]
    a2 = np.maximum(z2, 0.0)
    logits = a2 @ params["out_w"].T + params["out_b"]
    return x, z1, a1, z2, a2, logits


def student_forward(model: StudentModel, batch: FeatureBatch) -> np.ndarray:
    """Probabilities [n, 5]; rejects batches from a different feature layout."""
    _check_hash(model, batch)
    return nc.softmax(_forward(model, batch)[-1])


def score_one(model: StudentModel, fv: StudentFeatureVector) -> SoftLabel:
    batch = FeatureBatch.from_pairs([(fv, None)], model.layout)
    probs = student_forward(model, batch)[0]
    return SoftLabel(tuple(float(p) for p in probs))


def expected_gain(probs: np.ndarray) -> np.ndarray:
    """Scalar ranking score per row: probability-weighted relevance gain."""
    return np.asarray(probs, dtype=np.float64) @ GAINS


def student_loss_and_grads(
    model: StudentModel, batch: FeatureBatch
) -> tuple[float, nc.Params]:
    """Mean soft-target cross-entropy and gradients for every parameter."""
    _check_hash(model, batch)
    if batch.targets is None:
        raise StudentError("batch has no targets")
    params, layout = model.params, model.layout
    x, z1, a1, z2, a2, logits = _forward(model, batch)
    loss, dlogits = nc.softmax_xent(logits, batch.targets)

    grads: nc.Params = {}
    grads["out_w"] = dlogits.T @ a2
    grads["out_b"] = dlogits.sum(axis=0)
    da2 = dlogits @ params["out_w"]
    dz2 = da2 * (z2 > 0.0)
    grads["fc2_w"] = dz2.T @ a1
    grads["fc2_b"] = dz2.sum(axis=0)
    da1 = dz2 @ params["fc2_w"]
    dz1 = da1 * (z1 > 0.0)
    grads["fc1_w"] = dz1.T @ x
    grads["fc1_b"] = dz1.sum(axis=0)
    dx = dz1 @ params["fc1_w"]

    offset = layout.d_query_emb + layout.d_pin_emb  # embeddings are inputs, no grads
    n_num, d_num = layout.n_numerical, layout.d_num
    dnum = dx[:, offset : offset + n_num * d_num].reshape(len(batch), n_num, d_num)
    grads["num_w"] = np.einsum("bn,bnd->nd", batch.numerical, dnum)
    grads["num_b"] = dnum.sum(axis=0)
    offset += n_num * d_num
    for j, (name, values) in enumerate(layout.categorical):
        dslice = dx[:, offset : offset + layout.d_cat]
        table_grad = np.zeros((len(values) + 1, layout.d_cat))
        np.add.at(table_grad, batch.cat_ids[:, j], dslice)
        grads[_cat_key(name)] = table_grad
        offset += layout.d_cat
    return loss, grads


def _valid_accuracy(model: StudentModel, batch: FeatureBatch) -> float:
    probs = student_forward(model, batch)
    return float(np.mean(np.argmax(probs, axis=1) == np.argmax(batch.targets, axis=1)))


def train_student(
    train_batch: FeatureBatch,
    valid_batch: FeatureBatch | None,
    config: StudentTrainConfig,
    layout: FeatureLayout,
) -> tuple[StudentModel, list[dict]]:
    """Minibatch Adam on soft-target cross-entropy; best-on-validation model."""
    if len(train_batch) == 0:
        raise StudentError("training batch is empty")
    if train_batch.targets is None:
        raise StudentError("training batch has no targets")
    model = init_student(layout, config.model, config.seed)
    _check_hash(model, train_batch)
    if valid_batch is not None and len(valid_batch) > 0:
        _check_hash(model, valid_batch)
    else:
        valid_batch = None
    state = nc.AdamState.for_params(
        model.params, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps
    )
    rng = np.random.default_rng(config.seed + 1)

    history: list[dict] = []
    best_params: nc.Params | None = None
    best_accuracy = -1.0
    epochs_since_best = 0
    n = len(train_batch)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for batch_index, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            minibatch = train_batch.take(idx)
            try:
                loss, grads = student_loss_and_grads(model, minibatch)
            except nc.NonFiniteError as exc:
                raise nc.TrainingDiverged(
                    f"non-finite loss at epoch {epoch} batch {batch_index}",
                    batch_index,
                    nc.param_norms(model.params),
                ) from exc
            if not np.isfinite(loss):
                raise nc.TrainingDiverged(
                    f"non-finite loss at epoch {epoch} batch {batch_index}",
                    batch_index,
                    nc.param_norms(model.params),
                )
            nc.adam_step(model.params, grads, state)
            epoch_loss += loss * len(idx)
        epoch_loss /= n

        entry = {"epoch": epoch, "train_loss": epoch_loss}
        if valid_batch is not None:
            entry["valid_accuracy"] = _valid_accuracy(model, valid_batch)
            if entry["valid_accuracy"] > best_accuracy:
                best_accuracy = entry["valid_accuracy"]
                best_params = nc.clone_params(model.params)
                epochs_since_best = 0
            else:
                epochs_since_best += 1
        history.append(entry)
        logger.info("student epoch %d: %s", epoch, entry)
        if valid_batch is not None and epochs_since_best >= config.patience:
            break

    if best_params is not None:
        model.params = best_params
    return model, history


def eval_student(
    model: StudentModel,
    batch: FeatureBatch,
    query_ids: Sequence[str] | None = None,
    ks: Sequence[int] = (8, 20),
) -> EvalReport:
    """Score a labeled batch; if query ids are given, also compute ranking
    metrics over per-query lists ordered by predicted expected gain."""
    if batch.targets is None:
        raise StudentError("evaluation batch has no targets")
    probs = student_forward(model, batch)
    scored = [
        ScoredExample(
            predicted=SoftLabel(tuple(float(p) for p in row)),
            true_label=SoftLabel(tuple(float(t) for t in target)),
        )
        for row, target in zip(probs, batch.targets)
    ]
    ranked_lists: list[list[int]] = []
    if query_ids is not None:
        if len(query_ids) != len(batch):
            raise StudentError("query_ids length != batch size")
        gains = expected_gain(probs)
        true_levels = np.argmax(batch.targets, axis=1) + 1
        groups: dict[str, list[int]] = {}
        for i, qid in enumerate(query_ids):
            groups.setdefault(qid, []).append(i)
        for qid in sorted(groups):
            idx = np.array(groups[qid], dtype=np.int64)
            order = np.argsort(-gains[idx], kind="stable")
            ranked_lists.append([int(true_levels[i]) for i in idx[order]])
    return build_report(scored, ranked_lists, ks=ks)


def save_student(model: StudentModel, path: str | Path) -> None:
    meta = {
        "kind": "student",
        "layout": model.layout.to_dict(),
        "layout_hash": model.layout_hash,
        "hidden1": model.config.hidden1,
        "hidden2": model.config.hidden2,
    }
    nc.save_checkpoint(path, model.params, meta)


def load_student(path: str | Path, expected_layout: FeatureLayout | None = None) -> StudentModel:
    params, meta = nc.load_checkpoint(path)
    if meta.get("kind") != "student":
        raise StudentError(f"{path}: not a student checkpoint")
    layout = FeatureLayout.from_dict(meta["layout"])
    if layout.layout_hash() != meta.get("layout_hash"):
        raise StudentError(f"{path}: stored layout does not match its hash")
    if expected_layout is not None and expected_layout.layout_hash() != layout.layout_hash():
        raise StudentError(
            f"{path}: checkpoint layout {layout.layout_hash()} != "
            f"expected {expected_layout.layout_hash()}"
        )
    config = StudentConfig(hidden1=int(meta["hidden1"]), hidden2=int(meta["hidden2"]))
    model = StudentModel(params=params, layout=layout, config=config)
    if params["fc1_w"].shape != (config.hidden1, layout.input_dim):
        raise StudentError(f"{path}: trunk shape does not match layout")
    return model
