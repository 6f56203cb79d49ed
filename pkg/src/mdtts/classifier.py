"""Mel-statistics dialect classifier.

A two-layer network over per-bin mel statistics with a 3-way softmax head.
The penultimate activations serve as the dialect embedding: per-dialect
centroids of those embeddings back the cosine-similarity consistency score,
and the argmax head backs classification accuracy.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import (
    AdamState,
    Tape,
    Tensor,
    adam_step,
    add,
    backward,
    gelu,
    log_softmax_rows,
    matmul,
    mul,
    neg,
    reduce_mean,
    reduce_sum,
    softmax_rows,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import decs

log = logging.getLogger(__name__)

__all__ = [
    "DialectClassifier", "mel_features", "train_dialect_classifier", "dca",
    "export_dialect_features", "save_classifier", "load_classifier",
]

N_CLASSES = 3


def mel_features(mel_frames: np.ndarray) -> np.ndarray:
    """Per-bin mean and standard deviation over time, concatenated."""
    mel_frames = np.asarray(mel_frames, dtype=np.float64)
    if mel_frames.ndim != 2:
        raise ValueError(f"mel frames must be 2-D, got {mel_frames.shape}")
    return np.concatenate([mel_frames.mean(axis=0), mel_frames.std(axis=0)])


@dataclass
class DialectClassifier:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    feat_mean: np.ndarray
    feat_std: np.ndarray
    centroids: np.ndarray | None = None  # (3, emb_dim)
    heldout_accuracy: float | None = None

    @property
    def embedding_dim(self) -> int:
        return self.w1.shape[1]

    def _normalized(self, mel_frames: np.ndarray) -> Tensor:
        feats = (mel_features(mel_frames) - self.feat_mean) / self.feat_std
        return Tensor(feats.reshape(1, -1))

    def embed(self, mel_frames: np.ndarray) -> np.ndarray:
        """Penultimate-layer dialect embedding of one utterance."""
        hidden = gelu(add(matmul(self._normalized(mel_frames), self.w1),
                          self.b1))
        return hidden.data.ravel().copy()

    def predict_proba(self, mel_frames: np.ndarray) -> np.ndarray:
        hidden = gelu(add(matmul(self._normalized(mel_frames), self.w1),
                          self.b1))
        logits = add(matmul(hidden, self.w2), self.b2)
        return softmax_rows(logits).data.ravel().copy()

    def predict(self, mel_frames: np.ndarray) -> int:
        return int(np.argmax(self.predict_proba(mel_frames)))

    def decs_to_centroid(self, mel_frames: np.ndarray, did: int) -> float:
        if self.centroids is None:
            raise ValueError("classifier has no centroids; retrain first")
        return decs(self.embed(mel_frames), self.centroids[did])

    def params(self) -> dict[str, Tensor]:
        return {"clf.w1": self.w1, "clf.b1": self.b1,
                "clf.w2": self.w2, "clf.b2": self.b2}


def train_dialect_classifier(samples: list[tuple[np.ndarray, int]],
                             epochs: int = 30,
                             seed: int = 0,
                             embedding_dim: int = 32,
                             lr: float = 3e-3,
                             holdout_fraction: float = 0.2,
                             batch_size: int = 16) -> DialectClassifier:
    """Cross-entropy training over (mel, dialect id) pairs; seed-deterministic.

    A held-out fraction is split off before training and scored afterwards;
    per-dialect embedding centroids are computed over the training split.
    """
    if not samples:
        raise ValueError("no training samples")
    labels = {did for _, did in samples}
    if len(labels) < 2:
        raise ValueError(
            f"need at least 2 dialects to train, manifest has {sorted(labels)}")
    rng = np.random.default_rng(seed)
    features = np.stack([mel_features(mel) for mel, _ in samples])
    targets = np.array([did for _, did in samples], dtype=np.int64)

    order = rng.permutation(len(samples))
    n_holdout = max(1, int(round(len(samples) * holdout_fraction)))
    hold_idx, train_idx = order[:n_holdout], order[n_holdout:]
    if len(train_idx) == 0:
        raise ValueError("holdout fraction leaves no training data")

    feat_mean = features[train_idx].mean(axis=0)
    feat_std = np.maximum(features[train_idx].std(axis=0), 1e-8)
    normed = (features - feat_mean) / feat_std

    in_dim = features.shape[1]
    clf = DialectClassifier(
        w1=Tensor(rng.normal(scale=1.0 / math.sqrt(in_dim),
                             size=(in_dim, embedding_dim)), requires_grad=True),
        b1=Tensor(np.zeros(embedding_dim), requires_grad=True),
        w2=Tensor(rng.normal(scale=1.0 / math.sqrt(embedding_dim),
                             size=(embedding_dim, N_CLASSES)), requires_grad=True),
        b2=Tensor(np.zeros(N_CLASSES), requires_grad=True),
        feat_mean=feat_mean,
        feat_std=feat_std,
    )
    params = clf.params()
    state = AdamState()
    onehot = np.eye(N_CLASSES)

    for _ in range(epochs):
        epoch_order = rng.permutation(train_idx)
        for start in range(0, len(epoch_order), batch_size):
            idx = epoch_order[start:start + batch_size]
            x = Tensor(normed[idx])
            y = Tensor(onehot[targets[idx]])
            with Tape() as tape:
                hidden = gelu(add(matmul(x, clf.w1), clf.b1))
                logits = add(matmul(hidden, clf.w2), clf.b2)
                loss = neg(reduce_mean(
                    reduce_sum(mul(log_softmax_rows(logits), y), axis=1)))
            grads = backward(tape, loss)
            adam_step(params,
                      {name: grads[t.id] for name, t in params.items()
                       if t.id in grads},
                      state, lr=lr)

    def batch_embed(idx):
        hidden = gelu(add(matmul(Tensor(normed[idx]), clf.w1), clf.b1))
        return hidden.data

    def batch_predict(idx):
        hidden = batch_embed(idx)
        logits = hidden @ clf.w2.data + clf.b2.data
        return np.argmax(logits, axis=1)

    clf.heldout_accuracy = float(
        np.mean(batch_predict(hold_idx) == targets[hold_idx]) * 100.0)
    train_emb = batch_embed(train_idx)
    centroids = np.zeros((N_CLASSES, embedding_dim))
    for did in range(N_CLASSES):
        mask = targets[train_idx] == did
        if mask.any():
            centroids[did] = train_emb[mask].mean(axis=0)
    clf.centroids = centroids
    log.info("classifier trained: held-out accuracy %.2f%%",
             clf.heldout_accuracy)
    return clf


def dca(classifier, samples: list[tuple[np.ndarray, int]]) -> float:
    """Dialect classification accuracy over (mel, label) pairs, in percent."""
    if not samples:
        raise ValueError("cannot score an empty manifest")
    hits = sum(1 for mel, did in samples if classifier.predict(mel) == did)
    return 100.0 * hits / len(samples)


def export_dialect_features(classifier: DialectClassifier,
                            labeled: list[tuple[str, str, np.ndarray]],
                            out_csv: str | Path) -> list[dict]:
    """One row per utterance: id, dialect, softmax triple, embedding values."""
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    emb_dim = classifier.embedding_dim
    rows = []
    try:
        with out_csv.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "dialect", "p0", "p1", "p2",
                             *(f"e{i}" for i in range(emb_dim))])
            for utt_id, dialect, mel in labeled:
                proba = classifier.predict_proba(mel)
                emb = classifier.embed(mel)
                row = {"id": utt_id, "dialect": dialect,
                       "proba": proba, "embedding": emb}
                rows.append(row)
                writer.writerow([utt_id, dialect,
                                 *(repr(float(p)) for p in proba),
                                 *(repr(float(e)) for e in emb)])
    except OSError as exc:
        raise OSError(f"failed writing feature export to {out_csv}: {exc}") from exc
    return rows


def save_classifier(path: str | Path, clf: DialectClassifier) -> None:
    params = dict(clf.params())
    params["clf.feat_mean"] = Tensor(clf.feat_mean)
    params["clf.feat_std"] = Tensor(clf.feat_std)
    if clf.centroids is not None:
        params["clf.centroids"] = Tensor(clf.centroids)
    meta = {"kind": "dialect-classifier"}
    if clf.heldout_accuracy is not None:
        meta["heldout_accuracy"] = repr(clf.heldout_accuracy)
    save_checkpoint(path, params, meta=meta)


def load_classifier(path: str | Path) -> DialectClassifier:
    params, meta = load_checkpoint(path)
    if meta.get("kind") != "dialect-classifier":
        raise ValueError(f"{path} is not a dialect classifier checkpoint")
    clf = DialectClassifier(
        w1=params["clf.w1"], b1=params["clf.b1"],
        w2=params["clf.w2"], b2=params["clf.b2"],
        feat_mean=params["clf.feat_mean"].data.copy(),
        feat_std=params["clf.feat_std"].data.copy(),
        centroids=(params["clf.centroids"].data.copy()
                   if "clf.centroids" in params else None),
        heldout_accuracy=(float(meta["heldout_accuracy"])
                          if "heldout_accuracy" in meta else None),
    )
    return clf
