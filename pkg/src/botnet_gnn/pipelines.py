"""The four detection pipelines: VAE-MLP, VAE-GCN, VAE-GAT and ViT-MLP."""
from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import autodiff as ad
from .dataset import (BINARY_NAMES, CLASS_NAMES, DataMatrix, Standardizer,
                      binary_labels, split, subsample_per_class)
from .gnn import GatConfig, GatModel, GcnConfig, GcnModel, gather_rows
from .graph import (TransductiveGraph, assemble_transductive, edgeless_graph, induced_subgraph,
                    khop_nodes)
from .metrics import EvalReport, compute_metrics
from .params import ParamStore
from .training import (MlpHead, TrainHistory, TrainHyper, argmax_labels, fit_classifier,
                       predict_logits)
from .vae import VaeConfig, VaeModel, train_vae
from .vit import VitConfig, VitMlp

log = logging.getLogger(__name__)


class PipelineKind(str, Enum):
    VAE_MLP = "vae-mlp"
    VAE_GCN = "vae-gcn"
    VAE_GAT = "vae-gat"
    VIT_MLP = "vit-mlp"

    @property
    def uses_vae(self) -> bool:
        return self is not PipelineKind.VIT_MLP

    @property
    def uses_graph(self) -> bool:
        return self in (PipelineKind.VAE_GCN, PipelineKind.VAE_GAT)


class Task(str, Enum):
    BINARY = "binary"
    MULTICLASS = "multiclass"

    @property
    def num_classes(self) -> int:
        return 2 if self is Task.BINARY else len(CLASS_NAMES)

    @property
    def class_names(self) -> tuple:
        return BINARY_NAMES if self is Task.BINARY else CLASS_NAMES

    def labels(self, class_ids: np.ndarray) -> np.ndarray:
        if self is Task.BINARY:
            return binary_labels(class_ids).astype(np.int64)
        return np.asarray(class_ids, dtype=np.int64)


class TransductiveOnly(RuntimeError):
    """GNN pipelines only classify nodes of the graph they were trained on."""


@dataclass
class PipelineConfig:
    kind: PipelineKind
    task: Task = Task.MULTICLASS
    hyper: TrainHyper = field(default_factory=TrainHyper)
    vae: VaeConfig = field(default_factory=VaeConfig)
    vit: VitConfig = field(default_factory=VitConfig)
    gcn_hidden: int = 16
    gat_heads: int = 2
    gat_head_dim: int = 8
    gat_slope: float = 0.2
    mlp_hidden: int = 32
    k_neighbors: int = 3
    edgeless: bool = False  # replace the kNN graph by self-loops only

    def __post_init__(self):
        self.kind = PipelineKind(self.kind)
        self.task = Task(self.task)

    def vae_config(self) -> VaeConfig:
        h = self.hyper
        return replace(self.vae, epochs=h.epochs, batch_size=h.batch, lr=h.lr, seed=h.seed)

    def vit_config(self) -> VitConfig:
        h = self.hyper
        return replace(self.vit, epochs=h.epochs, batch_size=h.batch, lr=h.lr, seed=h.seed)

    def gcn_config(self) -> GcnConfig:
        return GcnConfig(in_dim=self.vae.latent_dim, hidden=self.gcn_hidden,
                         num_classes=self.task.num_classes, seed=self.classifier_seed)

    def gat_config(self) -> GatConfig:
        return GatConfig(in_dim=self.vae.latent_dim, heads=self.gat_heads,
                         head_dim=self.gat_head_dim, num_classes=self.task.num_classes,
                         output_heads=self.gat_heads, slope=self.gat_slope,
                         seed=self.classifier_seed)

    @property
    def classifier_seed(self) -> list:
        return [self.hyper.seed, 3]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "task": self.task.value,
            "hyper": self.hyper.to_dict(),
            "vae": self.vae.to_dict(),
            "vit": self.vit.to_dict(),
            "gcn_hidden": self.gcn_hidden,
            "gat_heads": self.gat_heads,
            "gat_head_dim": self.gat_head_dim,
            "gat_slope": self.gat_slope,
            "mlp_hidden": self.mlp_hidden,
            "k_neighbors": self.k_neighbors,
            "edgeless": self.edgeless,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        d["hyper"] = TrainHyper(**d.get("hyper", {}))
        d["vae"] = VaeConfig(**d.get("vae", {}))
        d["vit"] = VitConfig(**d.get("vit", {}))
        return cls(**d)


@dataclass
class PreparedData:
    """Standardized features ordered train rows first, then test rows."""

    features: np.ndarray  # (N, 115) float32
    labels: np.ndarray  # task labels, int64
    n_train: int
    standardizer: Standardizer
    source_rows: np.ndarray  # row ids in the (subsampled) DataMatrix, same order

    @property
    def train_ids(self) -> np.ndarray:
        return np.arange(self.n_train)

    @property
    def test_ids(self) -> np.ndarray:
        return np.arange(self.n_train, len(self.labels))


def prepare(data: DataMatrix, task: Task, seed: int, subsample_cap: int | None = None,
            subsample_seed: int | None = None) -> PreparedData:
    """Subsample (stratified on task labels), split 80/20 and standardize on train rows."""
    task = Task(task)
    task_labels = task.labels(data.labels)
    rows = np.arange(len(data))
    if subsample_cap is not None:
        rows = subsample_per_class(task_labels, subsample_cap,
                                   seed if subsample_seed is None else subsample_seed)
    sp = split(len(rows), seed)
    order = rows[np.concatenate([sp.train_idx, sp.test_idx])]
    std = Standardizer.fit(data.features[order[:len(sp.train_idx)]])
    return PreparedData(std.transform(data.features[order]), task_labels[order],
                        len(sp.train_idx), std, order)


@dataclass
class PipelineModel:
    config: PipelineConfig
    classifier: object
    vae: VaeModel | None = None
    embeddings: np.ndarray | None = None
    graph: TransductiveGraph | None = None
    standardizer: Standardizer | None = None

    def param_store(self) -> ParamStore:
        store = ParamStore()
        if self.vae is not None:
            store.merge(self.vae.store, "vae.")
        store.merge(self.classifier.store, "cls.")
        return store

    def node_logits(self) -> np.ndarray:
        if self.graph is None:
            raise TransductiveOnly("model has no graph")
        with ad.no_grad():
            return self.classifier.forward(self.embeddings, self.graph.graph).data


@dataclass
class RunResult:
    model: PipelineModel
    report: EvalReport
    timings: dict
    histories: dict


@contextmanager
def _stage(timings: dict, name: str):
    start = time.perf_counter()
    yield
    timings[name] = time.perf_counter() - start
    log.info("stage %s took %.3f s", name, timings[name])


def build_classifier(config: PipelineConfig, store: ParamStore | None = None):
    kind, c = config.kind, config.task.num_classes
    if kind is PipelineKind.VAE_MLP:
        return MlpHead(config.vae.latent_dim, config.mlp_hidden, c, seed=config.classifier_seed,
                       store=store)
    if kind is PipelineKind.VAE_GCN:
        return GcnModel(config.gcn_config(), store)
    if kind is PipelineKind.VAE_GAT:
        return GatModel(config.gat_config(), store)
    return VitMlp(config.vit_config(), c, config.mlp_hidden, store)


def run_pipeline(config: PipelineConfig, data: PreparedData) -> RunResult:
    """Train one pipeline on the train rows of ``data`` and evaluate on its test rows."""
    timings: dict = {}
    histories: dict = {}
    hyper = config.hyper
    train_ids, test_ids = data.train_ids, data.test_ids
    # labels of test rows are hidden from every training loop
    train_labels = np.full(len(data.labels), -1, dtype=np.int64)
    train_labels[train_ids] = data.labels[train_ids]
    model = PipelineModel(config, classifier=None, standardizer=data.standardizer)

    if config.kind.uses_vae:
        with _stage(timings, "vae_train"):
            vae, vh = train_vae(data.features[train_ids], config.vae_config())
        histories["vae"] = vh.epoch_loss
        with _stage(timings, "embed"):
            z = vae.embed(data.features)
        model.vae, model.embeddings = vae, z

    classifier = build_classifier(config)
    model.classifier = classifier

    if config.kind.uses_graph:
        with _stage(timings, "graph_build"):
            if config.edgeless:
                tg = TransductiveGraph(edgeless_graph(len(z)),
                                       np.arange(len(z)) < data.n_train,
                                       np.arange(len(z)) >= data.n_train)
            else:
                tg = assemble_transductive(z[train_ids], z[test_ids], config.k_neighbors)
        model.graph = tg
        g = tg.graph

        def logits_fn(ids):
            # the batch's receptive field is enough for exact logits
            nodes = khop_nodes(g, ids, classifier.depth)
            out = classifier.forward(z[nodes], induced_subgraph(g, nodes))
            return gather_rows(out, np.searchsorted(nodes, ids))
    elif config.kind is PipelineKind.VAE_MLP:
        def logits_fn(ids):
            return classifier.forward(z[ids])
    else:
        x = data.features

        def logits_fn(ids):
            return classifier.forward(x[ids])

    with _stage(timings, "classifier_train"):
        history: TrainHistory = fit_classifier(classifier.store, logits_fn, train_ids,
                                               train_labels, hyper, name=config.kind.value)
    histories["train_loss"] = history.train_loss
    histories["val_loss"] = history.val_loss

    with _stage(timings, "evaluate"):
        if config.kind.uses_graph:
            logits = model.node_logits()[test_ids]
        else:
            logits = predict_logits(logits_fn, test_ids)
        pred = argmax_labels(logits)
        report = compute_metrics(data.labels[test_ids], pred, config.task.num_classes,
                                 config.task.class_names, config.task.value, config.kind.value)
    report.timings = dict(timings)
    return RunResult(model, report, timings, histories)


def predict(model: PipelineModel, rows: np.ndarray) -> np.ndarray:
    """Class ids for ``rows``.

    MLP kinds take standardized (N, 115) feature rows. GNN kinds only accept
    integer node ids of the stored graph; feature rows raise TransductiveOnly.
    """
    rows = np.asarray(rows)
    kind = model.config.kind
    if kind.uses_graph:
        if not np.issubdtype(rows.dtype, np.integer) or rows.ndim != 1:
            raise TransductiveOnly(f"{kind.value} can only label nodes of its training graph; "
                                   "pass integer node ids")
        if rows.size and (rows.min() < 0 or rows.max() >= len(model.embeddings)):
            raise TransductiveOnly(f"node ids outside [0, {len(model.embeddings)})")
        return argmax_labels(model.node_logits()[rows])
    rows = rows.astype(np.float32)
    with ad.no_grad():
        if kind is PipelineKind.VAE_MLP:
            logits = model.classifier.forward(model.vae.embed(rows)).data
        else:
            logits = model.classifier.forward(rows).data
    return argmax_labels(logits)
