"""Minibatch training for the embedding model and the classification baseline."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from zsltag.errors import ConfigError, DataError, NumericalError
from zsltag.features import chunk_track, sample_chunk
from zsltag.model import (
    EncoderConfig,
    ModelParams,
    audio_forward_batch,
    backward,
    classifier_forward,
    embedding_forward,
    init_params,
    relevance_matrix,
    semantic_forward_batch,
    sigmoid,
    tiny_profile,
)
from zsltag.sideinfo import SemanticTable
from zsltag.split import SetupView, holdout_validation

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.2
    learning_rate: float = 0.001
    momentum: float = 0.9
    nesterov: bool = True
    lr_decay: float = 1e-6
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    valid_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0:
            raise ConfigError("margin must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be positive")

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


# The reference optimizer settings converge far too slowly for the tiny
# profile on desk-scale synthetic data; this preset is used with it.
TINY_TRAIN = TrainConfig(margin=0.5, learning_rate=0.05, max_epochs=200, patience=20)
TRAIN_PRESETS = {"paper": TrainConfig(), "tiny": TINY_TRAIN}


class NesterovSGD:
    """SGD with (Nesterov) momentum and per-update decay ``lr / (1 + decay * t)``.

        v <- momentum * v - lr_t * g
        p <- p + momentum * v - lr_t * g      (Nesterov)
        p <- p + v                             (classical)
    """

    def __init__(self, lr: float, momentum: float = 0.9, decay: float = 0.0, nesterov: bool = True):
        self.lr = lr
        self.momentum = momentum
        self.decay = decay
        self.nesterov = nesterov
        self.iterations = 0
        self.velocity: dict[str, np.ndarray] = {}

    @property
    def current_lr(self) -> float:
        return self.lr / (1.0 + self.decay * self.iterations)

    def step(self, tensors: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        lr = self.current_lr
        for name, p in tensors.items():
            g = grads[name]
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(p)
            v *= self.momentum
            v -= lr * g
            if self.nesterov:
                p += self.momentum * v - lr * g
            else:
                p += v
        self.iterations += 1


class NoNegativeLabel(DataError):
    """The instance is positive on every candidate label, so no negative can be drawn."""


def sample_pair(positives: Sequence[int], seen: Sequence[int], rng) -> tuple[int, int]:
    """Uniform positive from ``positives & seen`` and uniform negative from ``seen - positives``."""
    pos_set = set(positives)
    pos = [l for l in seen if l in pos_set]
    neg = [l for l in seen if l not in pos_set]
    if not pos:
        raise DataError("instance has no positive among the candidate labels")
    if not neg:
        raise NoNegativeLabel("instance is positive on every candidate label")
    return pos[int(rng.integers(len(pos)))], neg[int(rng.integers(len(neg)))]


def _check_features(features, ids, d):
    for i in ids:
        if i not in features:
            raise DataError(f"no features for instance {i!r}")
        x = features[i]
        if x.ndim != 2 or x.shape[1] != d:
            raise DataError(f"features of {i!r} have shape {x.shape}, expected (T, {d})")


def _feature_dim(features, ids) -> int:
    if not ids:
        raise DataError("empty train set")
    first = ids[0]
    if first not in features:
        raise DataError(f"no features for instance {first!r}")
    return features[first].shape[1]


def _batches(n: int, size: int):
    for s in range(0, n, size):
        yield slice(s, min(s + size, n))


def _run(params: ModelParams, view, train_ids, valid_ids, features, config, make_batch, forward):
    """Shared epoch loop: returns the best-validation parameters and the per-epoch log."""
    chunk = params.config.input_frames
    rng = np.random.default_rng(config.seed)
    vrng = np.random.default_rng([config.seed, 1])
    valid_x = np.stack([sample_chunk(features[i], chunk, vrng) for i in valid_ids]) if valid_ids else None
    valid_aux = make_batch(valid_ids, vrng) if valid_ids else None

    opt = NesterovSGD(config.learning_rate, config.momentum, config.lr_decay, config.nesterov)
    best, best_key, stale, log = params.copy(), (np.inf, np.inf), 0, []
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_ids))
        total = 0.0
        for sl in _batches(len(order), config.batch_size):
            ids = [train_ids[k] for k in order[sl]]
            x = np.stack([sample_chunk(features[i], chunk, rng) for i in ids])
            loss, cache = forward(params, x, make_batch(ids, rng))
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            opt.step(params.tensors, backward(params, cache))
            total += loss * len(ids)
        train_loss = total / len(order)
        # cosine scores bound the hinge loss, so divergence can hide behind a finite loss
        bad = [k for k, v in params.tensors.items() if not np.all(np.isfinite(v))]
        if bad:
            raise NumericalError(f"non-finite parameters {bad} at epoch {epoch}")
        valid_loss = train_loss if valid_x is None else _valid_loss(params, valid_x, valid_aux, forward)
        if not np.isfinite(valid_loss):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        log.append({"epoch": epoch, "train_loss": train_loss, "valid_loss": valid_loss, "lr": opt.current_lr})
        logger.debug("epoch %d train %.5f valid %.5f", epoch, train_loss, valid_loss)
        # ties (e.g. a small validation set at zero loss) go to the lower train loss
        if (valid_loss, train_loss) < best_key:
            best, best_key, stale = params.copy(), (valid_loss, train_loss), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    best.meta.update({"epochs_run": len(log), "best_valid_loss": best_key[0], "train_config": asdict(config)})
    return best, log


def _slice_aux(aux, sl):
    return tuple(a[sl] for a in aux)


def _valid_loss(params, valid_x, valid_aux, forward):
    total = 0.0
    for sl in _batches(len(valid_x), 256):
        total += forward(params, valid_x[sl], _slice_aux(valid_aux, sl))[0] * (sl.stop - sl.start)
    return total / len(valid_x)


def _trainable(view: SetupView):
    if not view.allows("train"):
        raise ConfigError(f"{view.name} is not a train setup")
    if not view.instance_ids:
        raise DataError(f"{view.name}: empty train set")


def train_embedding(
    view: SetupView,
    table: SemanticTable,
    features: Mapping[str, np.ndarray],
    config: TrainConfig = TrainConfig(),
    encoder: EncoderConfig | None = None,
) -> tuple[ModelParams, list[dict]]:
    """Train the joint embedding on a train setup with the hinge ranking loss.

    One (positive, negative) label pair and one random chunk are drawn per
    instance per epoch. The returned parameters are those with the lowest
    validation loss on a held-out fraction of the view.
    """
    _trainable(view)
    missing = [l for l in view.label_ids if l not in table]
    if missing:
        raise DataError(f"semantic table lacks seen labels {missing[:5]}")
    d = _feature_dim(features, view.instance_ids)
    _check_features(features, view.instance_ids, d)
    encoder = encoder or tiny_profile(semantic_dim=table.dim, input_bins=d)
    if encoder.semantic_dim != table.dim or encoder.input_bins != d:
        raise ConfigError("encoder dimensions do not match the semantic table / features")

    row = {iid: k for k, iid in enumerate(view.instance_ids)}
    pos_idx, neg_idx = {}, {}
    skipped = 0
    for iid in view.instance_ids:
        r = view.matrix[row[iid]]
        p, n = np.flatnonzero(r), np.flatnonzero(r == 0)
        if len(p) == 0 or len(n) == 0:
            skipped += 1
            continue
        pos_idx[iid], neg_idx[iid] = p, n
    if skipped:
        logger.info("train_embedding: skipping %d instances without a positive or negative label", skipped)
    train_ids, valid_ids = holdout_validation(view, config.valid_fraction, config.seed)
    train_ids = [i for i in train_ids if i in pos_idx]
    valid_ids = [i for i in valid_ids if i in pos_idx]
    if not train_ids:
        raise DataError(f"{view.name}: no trainable instances")

    sem = table.rows(view.label_ids)

    def make_batch(ids, rng):
        p = [pos_idx[i][rng.integers(len(pos_idx[i]))] for i in ids]
        n = [neg_idx[i][rng.integers(len(neg_idx[i]))] for i in ids]
        return sem[p], sem[n]

    def forward(params, x, aux):
        return embedding_forward(params, x, aux[0], aux[1], config.margin)

    params = init_params(encoder, config.seed)
    params, log = _run(params, view, train_ids, valid_ids, features, config, make_batch, forward)
    params.meta.update({"model": "embedding", "train_setup": view.name, "margin": config.margin})
    return params, log


def train_classifier(
    view: SetupView,
    features: Mapping[str, np.ndarray],
    config: TrainConfig = TrainConfig(),
    encoder: EncoderConfig | None = None,
) -> tuple[ModelParams, list[dict]]:
    """Train the audio branch with a sigmoid output per seen label and BCE loss."""
    _trainable(view)
    d = _feature_dim(features, view.instance_ids)
    _check_features(features, view.instance_ids, d)
    n = len(view.label_ids)
    encoder = encoder or tiny_profile(semantic_dim=1, input_bins=d, n_classes=n)
    if encoder.n_classes != n or encoder.input_bins != d:
        raise ConfigError("encoder classifier size / input bins do not match the train setup")
    row = {iid: k for k, iid in enumerate(view.instance_ids)}
    targets = view.matrix.astype(np.float64)
    train_ids, valid_ids = holdout_validation(view, config.valid_fraction, config.seed)

    def make_batch(ids, rng):
        return (targets[[row[i] for i in ids]],)

    def forward(params, x, aux):
        return classifier_forward(params, x, aux[0])

    params = init_params(encoder, config.seed, classes=view.label_ids)
    params, log = _run(params, view, list(train_ids), list(valid_ids), features, config, make_batch, forward)
    params.meta.update({"model": "classifier", "train_setup": view.name})
    return params, log


def write_log(path, log: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in log:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


# -- inference -------------------------------------------------------------------


def embed_tracks(params: ModelParams, features: Mapping[str, np.ndarray], ids: Sequence[str], batch: int = 256) -> np.ndarray:
    """Track-level embeddings: the mean chunk embedding over consecutive chunks."""
    chunk = params.config.input_frames
    chunks, owner = [], []
    for k, iid in enumerate(ids):
        if iid not in features:
            raise DataError(f"no features for instance {iid!r}")
        cs = chunk_track(features[iid], chunk)
        chunks.extend(cs)
        owner.extend([k] * len(cs))
    if not chunks:
        return np.zeros((0, params.config.embedding_dim))
    x = np.stack(chunks)
    emb = np.concatenate([audio_forward_batch(params, x[sl])[0] for sl in _batches(len(x), batch)])
    owner = np.asarray(owner)
    sums = np.zeros((len(ids), emb.shape[1]))
    np.add.at(sums, owner, emb)
    return sums / np.bincount(owner, minlength=len(ids))[:, None]


def track_embedding(params: ModelParams, features: np.ndarray) -> np.ndarray:
    return embed_tracks(params, {"_": features}, ["_"])[0]


def project_labels(params: ModelParams, table: SemanticTable, label_ids: Sequence[int]) -> np.ndarray:
    return semantic_forward_batch(params, table.rows(label_ids))[0]


def project_vectors(params: ModelParams, vectors: np.ndarray) -> np.ndarray:
    return semantic_forward_batch(params, np.atleast_2d(vectors))[0]


def score_labels(params: ModelParams, track_emb: np.ndarray, table: SemanticTable, candidates: Sequence[int]) -> dict[int, float]:
    """Cosine relevance between one track embedding and each candidate label."""
    candidates = list(candidates)
    scores = relevance_matrix(np.asarray(track_emb, float)[None], project_labels(params, table, candidates))[0]
    return dict(zip(candidates, scores.tolist()))


def score_matrix(
    params: ModelParams,
    features: Mapping[str, np.ndarray],
    instance_ids: Sequence[str],
    label_ids: Sequence[int],
    table: SemanticTable | None = None,
) -> np.ndarray:
    """(N, L) scores: cosine relevance for the embedding model, sigmoid outputs for the classifier."""
    emb = embed_tracks(params, features, instance_ids)
    if table is not None and params.meta.get("model") != "classifier":
        return relevance_matrix(emb, project_labels(params, table, label_ids))
    if not params.has_classifier:
        raise ConfigError("a semantic table is required to score with an embedding model")
    col = {l: k for k, l in enumerate(params.classes)}
    missing = [l for l in label_ids if l not in col]
    if missing:
        raise DataError(f"classifier has no output for labels {missing[:5]}")
    probs = sigmoid(emb @ params["cls.W"] + params["cls.b"])
    return probs[:, [col[l] for l in label_ids]]
