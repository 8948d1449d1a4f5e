"""Run-directory layout: config, checkpoint, embeddings, graph, report, logs."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .dataset import Standardizer
from .graph import TransductiveGraph, load_graph, save_graph
from .metrics import EvalReport, confusion_csv, report_json
from .params import FormatError, load_checkpoint, save_checkpoint
from .pipelines import PipelineConfig, PipelineModel, RunResult, build_classifier
from .vae import VaeModel, load_embeddings, save_embeddings

CONFIG = "config.json"
CHECKPOINT = "checkpoint.nbck"
EMBEDDINGS = "embeddings.nbem"
GRAPH = "graph.nbgr"
REPORT = "report.json"
TIMINGS = "timings.json"
CONFUSION = "confusion.csv"
HISTORY = "history.json"
LOG = "log.txt"


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_run(run_dir, result: RunResult, run_config: dict) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    model = result.model
    (run_dir / CONFIG).write_text(_dump(run_config))
    std = model.standardizer
    extra = {"standardizer": {"mean": std.mean.tolist(), "std": std.std.tolist()}}
    if model.graph is not None:
        extra["n_train"] = int(model.graph.train_mask.sum())
    save_checkpoint(run_dir / CHECKPOINT, model.param_store(), model.config.to_dict(), extra)
    if model.embeddings is not None:
        save_embeddings(run_dir / EMBEDDINGS, model.embeddings)
    if model.graph is not None:
        save_graph(run_dir / GRAPH, model.graph.graph)
    (run_dir / REPORT).write_text(report_json(result.report, timings=False))
    (run_dir / TIMINGS).write_text(_dump(result.timings))
    (run_dir / CONFUSION).write_text(confusion_csv(result.report))
    (run_dir / HISTORY).write_text(_dump(result.histories))
    return run_dir


def read_report(run_dir) -> EvalReport:
    return EvalReport.from_dict(json.loads((Path(run_dir) / REPORT).read_text()))


def load_model(run_dir) -> PipelineModel:
    """Rebuild a trained pipeline from its run directory."""
    run_dir = Path(run_dir)
    store, meta = load_checkpoint(run_dir / CHECKPOINT)
    config = PipelineConfig.from_dict(meta["config"])
    std_meta = meta.get("extra", {}).get("standardizer")
    if std_meta is None:
        raise FormatError(f"{run_dir / CHECKPOINT}: standardizer statistics missing")
    std = Standardizer(np.array(std_meta["mean"]), np.array(std_meta["std"]))
    model = PipelineModel(config, build_classifier(config, store.subset("cls.")), standardizer=std)
    if config.kind.uses_vae:
        model.vae = VaeModel(config.vae_config(), store.subset("vae."))
        emb_path = run_dir / EMBEDDINGS
        if emb_path.exists():
            model.embeddings = load_embeddings(emb_path)
    if config.kind.uses_graph:
        graph = load_graph(run_dir / GRAPH)
        n_train = int(meta["extra"]["n_train"])
        mask = np.arange(graph.n_nodes) < n_train
        model.graph = TransductiveGraph(graph, mask, ~mask)
        if model.embeddings is None:
            raise FormatError(f"{run_dir}: GNN run without {EMBEDDINGS}")
    return model
