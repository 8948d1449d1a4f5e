"""MLP head and the supervised mini-batch loop shared by every pipeline."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParamStore, adam_step, dense, init_dense

log = logging.getLogger(__name__)


@dataclass
class TrainHyper:
    lr: float = 0.001
    epochs: int = 20
    batch: int = 128
    val_fraction: float = 0.10
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class MlpHead:
    """[in -> hidden -> classes] with ReLU on the hidden layer."""

    def __init__(self, in_dim: int = 8, hidden: int = 32, num_classes: int = 10,
                 seed: int = 0, store: ParamStore | None = None):
        if num_classes < 2:
            raise ValueError("need at least two classes")
        self.dims = (in_dim, hidden, num_classes)
        if store is None:
            store = ParamStore()
            rng = np.random.default_rng(seed)
            init_dense(store, "fc0", in_dim, hidden, rng)
            init_dense(store, "fc1", hidden, num_classes, rng)
        self.store = store

    def forward(self, x) -> Tensor:
        return dense(self.store, "fc1", ad.relu(dense(self.store, "fc0", x)))

    def to_dict(self) -> dict:
        return {"in_dim": self.dims[0], "hidden": self.dims[1], "num_classes": self.dims[2]}


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)


def fit_classifier(store: ParamStore, logits_fn: Callable[[np.ndarray], Tensor],
                   train_ids: np.ndarray, labels: np.ndarray, hyper: TrainHyper,
                   name: str = "classifier") -> TrainHistory:
    """Adam on cross-entropy over mini-batches of ``train_ids``.

    ``logits_fn(ids)`` returns logits for the given ids. Each epoch a seeded
    ``val_fraction`` of ``train_ids`` is held out; those rows only contribute a
    logged validation loss, never a gradient.
    """
    train_ids = np.asarray(train_ids, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng([hyper.seed, 2])
    history = TrainHistory()
    n_val = int(round(hyper.val_fraction * len(train_ids)))
    for epoch in range(hyper.epochs):
        perm = rng.permutation(train_ids)
        val_ids, fit_ids = perm[:n_val], perm[n_val:]
        total = 0.0
        for lo in range(0, len(fit_ids), hyper.batch):
            ids = fit_ids[lo:lo + hyper.batch]
            loss = ad.cross_entropy_loss(logits_fn(ids), labels[ids])
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"{name}: non-finite loss at epoch {epoch + 1}")
            loss.backward()
            adam_step(store, lr=hyper.lr)
            total += loss.item() * len(ids)
        train_loss = total / max(len(fit_ids), 1)
        val_loss = float("nan")
        if n_val:
            with ad.no_grad():
                val_loss = ad.cross_entropy_loss(logits_fn(val_ids), labels[val_ids]).item()
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        log.info("%s epoch %d/%d train_loss %.6f val_loss %.6f",
                 name, epoch + 1, hyper.epochs, train_loss, val_loss)
    return history


def predict_logits(logits_fn: Callable[[np.ndarray], Tensor], ids: np.ndarray,
                   batch: int = 4096) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    chunks = []
    with ad.no_grad():
        for lo in range(0, len(ids), batch):
            chunks.append(logits_fn(ids[lo:lo + batch]).data)
    if not chunks:
        return np.empty((0, 0), dtype=np.float32)
    return np.concatenate(chunks)


def argmax_labels(logits: np.ndarray) -> np.ndarray:
    """Row argmax; ties resolve to the smallest class id."""
    return np.argmax(np.asarray(logits), axis=1).astype(np.int64)
