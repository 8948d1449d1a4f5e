"""Command-line entry point: ingest, train, evaluate, compare, cost."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path

from . import autodiff as ad
from .cost import CostInputs, CostOverflow, cost_table, crossover
from .dataset import (CLASS_NAMES, DataError, DataMatrix, ingest, load_data, load_manifest,
                      save_data)
from .metrics import comparison_csv, comparison_table, compute_metrics, report_json
from .params import FormatError
from .pipelines import (PipelineConfig, PipelineKind, Task, TransductiveOnly, predict, prepare,
                        run_pipeline)
from .rundir import LOG, load_model, write_run
from .training import TrainHyper

log = logging.getLogger("botnet_gnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

# flag name -> default; a JSON config file may set any of these
RUN_DEFAULTS = {
    "manifest": None,
    "data": None,
    "kind": "vae-mlp",
    "task": "multiclass",
    "seed": 0,
    "epochs": 20,
    "batch": 128,
    "lr": 0.001,
    "subsample_per_class": None,
    "deterministic": False,
    "out": None,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_run_flags(p: argparse.ArgumentParser, with_kind: bool) -> None:
    p.add_argument("--config", help="JSON file with defaults for any flag below")
    p.add_argument("--manifest", help="manifest JSON (ingested on the fly)")
    p.add_argument("--data", help="NBIO1 dataset cache")
    if with_kind:
        p.add_argument("--kind", choices=[k.value for k in PipelineKind])
    p.add_argument("--task", choices=[t.value for t in Task])
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--subsample-per-class", type=int, dest="subsample_per_class")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="float64-accumulated matmuls for bit-reproducible runs")
    p.add_argument("--out", help="output run directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="botnet-gnn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("ingest", help="manifest + CSVs -> NBIO1 cache and class counts")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train and evaluate one pipeline")
    _add_run_flags(p, with_kind=True)

    p = sub.add_parser("evaluate", help="re-evaluate a run directory's checkpoint")
    p.add_argument("--run", required=True, help="run directory written by train/compare")
    p.add_argument("--data", help="NBIO1 cache (defaults to the one recorded in the run)")
    p.add_argument("--manifest")
    p.add_argument("--out", help="write the report JSON here instead of stdout")

    p = sub.add_parser("compare", help="train all four pipelines on one dataset")
    _add_run_flags(p, with_kind=False)

    p = sub.add_parser("cost", help="evaluate the asymptotic cost table")
    p.add_argument("--inputs", required=True, help="CostInputs JSON")
    p.add_argument("--crossover", nargs=5, metavar=("KIND_A", "KIND_B", "SYMBOL", "LO", "HI"),
                   help="first SYMBOL value in [LO, HI] where KIND_A costs more than KIND_B")
    return parser


def resolve_run_config(args: argparse.Namespace) -> dict:
    """Defaults, overlaid by the --config file, overlaid by explicit flags."""
    cfg = dict(RUN_DEFAULTS)
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if not cfg["data"] and not cfg["manifest"]:
        raise UsageError("one of --data or --manifest is required")
    if cfg["subsample_per_class"] is not None and cfg["subsample_per_class"] < 1:
        raise UsageError("--subsample-per-class must be >= 1")
    if not cfg["out"]:
        raise UsageError("--out is required")
    PipelineKind(cfg["kind"])
    Task(cfg["task"])
    return cfg


def load_dataset(cfg: dict) -> DataMatrix:
    if cfg.get("data"):
        return load_data(cfg["data"])
    return ingest(load_manifest(cfg["manifest"]))


def pipeline_config(cfg: dict, kind) -> PipelineConfig:
    hyper = TrainHyper(lr=cfg["lr"], epochs=cfg["epochs"], batch=cfg["batch"], seed=cfg["seed"])
    return PipelineConfig(PipelineKind(kind), Task(cfg["task"]), hyper)


@contextmanager
def _run_log(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(run_dir / LOG, mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(message)s"))
    handler.setLevel(logging.INFO)
    log.addHandler(handler)
    prev = log.level
    log.setLevel(logging.INFO)
    try:
        yield
    finally:
        log.removeHandler(handler)
        log.setLevel(prev)
        handler.close()


def _train_one(cfg: dict, data: DataMatrix, kind, run_dir: Path):
    prepared = prepare(data, Task(cfg["task"]), cfg["seed"], cfg["subsample_per_class"])
    with _run_log(run_dir):
        log.info("run %s task=%s rows=%d train=%d", PipelineKind(kind).value, cfg["task"], len(prepared.labels),
                 prepared.n_train)
        result = run_pipeline(pipeline_config(cfg, kind), prepared)
    write_run(run_dir, result, {**cfg, "kind": PipelineKind(kind).value, "out": str(run_dir)})
    return result


def cmd_ingest(args) -> int:
    data = ingest(load_manifest(args.manifest))
    save_data(args.out, data)
    counts = data.class_counts()
    total = len(data)
    width = max(len(n) for n in CLASS_NAMES)
    for name in CLASS_NAMES:
        pct = 100.0 * counts[name] / total if total else 0.0
        print(f"{name.ljust(width)}  {counts[name]:>10,}  {pct:6.2f}%")
    print(f"{'total'.ljust(width)}  {total:>10,}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_run_config(args)
    ad.set_fast_mode(not cfg["deterministic"])
    data = load_dataset(cfg)
    result = _train_one(cfg, data, cfg["kind"], Path(cfg["out"]))
    print(comparison_table([result.report]))
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = resolve_run_config(args)
    ad.set_fast_mode(not cfg["deterministic"])
    data = load_dataset(cfg)
    out = Path(cfg["out"])
    reports = []
    for kind in PipelineKind:
        reports.append(_train_one(cfg, data, kind, out / kind.value).report)
    (out / "comparison.json").write_text(
        json.dumps([r.to_dict(timings=False) for r in reports], indent=2, sort_keys=True) + "\n")
    (out / "comparison.csv").write_text(comparison_csv(reports))
    table = comparison_table(reports)
    (out / "comparison.txt").write_text(table)
    print(table)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run)
    cfg = json.loads((run_dir / "config.json").read_text())
    if args.data or args.manifest:
        cfg["data"], cfg["manifest"] = args.data, args.manifest
    ad.set_fast_mode(not cfg["deterministic"])
    model = load_model(run_dir)
    data = load_dataset(cfg)
    prepared = prepare(data, Task(cfg["task"]), cfg["seed"], cfg["subsample_per_class"])
    test_ids = prepared.test_ids
    if model.config.kind.uses_graph:
        if len(model.embeddings) != len(prepared.labels):
            raise TransductiveOnly("dataset does not match the graph stored with this run")
        pred = predict(model, test_ids)
    else:
        pred = predict(model, prepared.features[test_ids])
    task = model.config.task
    report = compute_metrics(prepared.labels[test_ids], pred, task.num_classes, task.class_names,
                             task.value, model.config.kind.value)
    text = report_json(report)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_cost(args) -> int:
    try:
        inputs = CostInputs.from_json(Path(args.inputs).read_text())
    except (TypeError, ValueError) as exc:
        raise DataError(f"{args.inputs}: {exc}") from None
    print(cost_table(inputs), end="")
    if args.crossover:
        a, b, symbol, lo, hi = args.crossover
        try:
            at = crossover(a, b, inputs, symbol, range(int(lo), int(hi) + 1))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        print(f"crossover {a} > {b} over {symbol} in [{lo}, {hi}]: {at if at is not None else 'none'}")
    return EXIT_OK


def _console_logging(verbose: bool) -> None:
    # the run log raises the package logger to INFO; the console stays at WARNING unless -v
    for h in list(log.handlers):
        if getattr(h, "_botnet_console", False):
            log.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setLevel(logging.INFO if verbose else logging.WARNING)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    handler._botnet_console = True
    log.addHandler(handler)
    log.propagate = False


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "cost": cmd_cost,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        _console_logging(args.verbose)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, TransductiveOnly, CostOverflow, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        ad.set_fast_mode(False)


if __name__ == "__main__":
    sys.exit(main())
