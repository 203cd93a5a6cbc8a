"""Command line entry point: ``ressl <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Failures print one JSON object ``{"error", "message", "path"?}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .exceptions import ConfigError, IngestError, ResslError

logger = logging.getLogger("ressl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="experiment config file (YAML or JSON)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (or file, for single-artifact commands)")
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint in --out")
    p.add_argument("--log-level", default="INFO")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="ressl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[common], help="decode a dataset archive into packed splits")
    p.add_argument("--dataset", required=True)
    p.add_argument("--root", required=True, help="directory holding the archive; outputs go here too")
    p.add_argument("--split", action="append", help="split(s) to ingest (default: all of the dataset's splits)")
    p.add_argument("--archive", help="archive path if not <root>/<canonical name>")
    p.add_argument("--download", action="store_true", help="fetch the archive from its public URL if missing")
    p.add_argument("--url", help="override the download URL")
    p.add_argument("--no-verify", action="store_true", help="skip the archive md5 check")
    p.add_argument("--lenient-counts", action="store_true", help="accept non-canonical record counts")

    p = sub.add_parser("pretrain", parents=[common], help="run relational pretraining")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--tau-t", type=float)
    p.add_argument("--tau-s", type=float)
    p.add_argument("--queue-capacity", type=int)
    p.add_argument("--momentum", type=float, help="EMA momentum of the teacher")
    p.add_argument("--lr", type=float, help="peak learning rate")
    p.add_argument("--bn-groups", type=int)
    p.add_argument("--teacher-augmentation")
    p.add_argument("--objective", choices=["ressl", "info_nce", "byol_style"])
    p.add_argument("--data-root", help="override the dataset root directory")
    p.add_argument("--max-steps", type=int, help="stop (resumably) after this many global steps")
    p.add_argument("--device", help="torch device, e.g. cpu or cuda")
    p.add_argument("--workers", type=int, help="augmentation worker processes")

    for name, help_ in (("linear-eval", "train a linear probe on frozen features"),
                        ("knn", "weighted kNN accuracy of frozen features")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--dataset", help="dataset name (default: the checkpoint's)")
        p.add_argument("--data-root", help="dataset root (default: the checkpoint's)")
        p.add_argument("--network", choices=["student", "teacher"], default="student")
        if name == "linear-eval":
            p.add_argument("--epochs", type=int, default=100)
            p.add_argument("--lr", type=float, default=30.0)
            p.add_argument("--batch-size", type=int, default=256)
            p.add_argument("--milestones", default="60,80")
            p.add_argument("--augment", action="store_true", help="crop+flip the training images each epoch")
        else:
            p.add_argument("--k", type=int, default=200)
            p.add_argument("--temperature", type=float, default=0.1)

    p = sub.add_parser("export-embeddings", parents=[common], help="write per-record feature vectors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--features", choices=["embedding", "backbone"], default="embedding")
    p.add_argument("--network", choices=["student", "teacher"], default="student")
    p.add_argument("--data-root")

    p = sub.add_parser("sweep", parents=[common], help="pretrain + evaluate a grid over one axis")
    p.add_argument("--axis", required=True, choices=["tau_t", "queue_capacity", "teacher_augmentation"])
    p.add_argument("--values", required=True, help="comma separated axis values")
    p.add_argument("--budget-epochs", type=int)
    p.add_argument("--eval", choices=["knn", "linear"], default="knn")
    p.add_argument("--linear-epochs", type=int, default=100)
    p.add_argument("--parallel", type=int, default=1)

    p = sub.add_parser("plot", parents=[common], help="plot metrics or sweep tables (CSV always emitted)")
    p.add_argument("--kind", required=True, choices=["lr_curve", "loss_curve", "entropy_curve", "sweep_bar"])
    p.add_argument("inputs", nargs="*", help="metrics JSONL files, or a sweep CSV for sweep_bar")
    p.add_argument("--steps-per-epoch", type=int, help="with --config and no inputs: plot the planned lr schedule")
    return parser


def _config(args):
    from .config import ExperimentConfig, load_config

    if args.config is None:
        raise ConfigError("--config is required")
    config = load_config(args.config)
    if args.seed is not None:
        config = config.override(seed=args.seed)
    return config


def _dataset(args, config):
    from .data import DatasetSpec

    name = getattr(args, "dataset", None) or (config.dataset.name if config.dataset else None)
    root = args.data_root or (config.dataset.root_path if config.dataset else None)
    if name is None or root is None:
        raise ConfigError("dataset name and root are needed (--dataset/--data-root)")
    return DatasetSpec(name, root, "train")


def cmd_ingest(args) -> dict:
    from .data import DATASETS, DatasetSpec, ingest

    if args.dataset not in DATASETS:
        raise ConfigError(f"unknown dataset {args.dataset!r}")
    splits = args.split or list(DATASETS[args.dataset].counts)
    out = {}
    for split in splits:
        spec = DatasetSpec(args.dataset, args.root, split)
        manifest = ingest(spec, args.archive, verify_archive=not args.no_verify,
                          strict_counts=not args.lenient_counts, allow_download=args.download, url=args.url)
        out[split] = {"count": manifest.count, "manifest": str(spec.manifest_path)}
    return out


def cmd_pretrain(args) -> dict:
    from .trainer import Trainer

    config = _config(args)
    changes = dict(epochs=args.epochs, batch_size=args.batch_size, tau_t=args.tau_t, tau_s=args.tau_s,
                   queue_capacity=args.queue_capacity, ema_momentum=args.momentum, base_lr=args.lr,
                   bn_groups=args.bn_groups, teacher_augmentation=args.teacher_augmentation,
                   objective=args.objective, device=args.device, num_workers=args.workers)
    if args.data_root:
        ds = config.dataset
        changes["dataset"] = {"name": ds.name, "root_path": args.data_root, "split": ds.split}
    config = config.override(**changes)
    if args.out is None:
        raise ConfigError("--out is required for pretrain")
    result = Trainer(config, args.out).run(resume=args.resume, max_steps=args.max_steps)
    return {"checkpoint": str(result.checkpoint), "steps": result.state.global_step,
            "collapse_warnings": len(result.warnings), "metrics": str(Path(args.out) / "metrics.jsonl")}


def _write_report(report, out) -> None:
    if out:
        path = Path(out)
        if path.suffix != ".json":
            path.mkdir(parents=True, exist_ok=True)
            path = path / "eval.json"
        report.save(path)


def cmd_linear_eval(args) -> dict:
    from .evaluation import LinearEvalConfig, linear_eval, load_networks

    _, config, _ = load_networks(args.checkpoint, args.network)
    milestones = tuple(int(m) for m in args.milestones.split(",") if m)
    report = linear_eval(args.checkpoint, _dataset(args, config),
                         LinearEvalConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                                          milestones=milestones, train_augmentation=args.augment,
                                          seed=args.seed or 0),
                         network=args.network)
    _write_report(report, args.out)
    return json.loads(report.to_json())


def cmd_knn(args) -> dict:
    from .evaluation import knn_eval, load_networks

    _, config, _ = load_networks(args.checkpoint, args.network)
    report = knn_eval(args.checkpoint, _dataset(args, config), args.k, args.temperature, args.network)
    _write_report(report, args.out)
    return json.loads(report.to_json())


def cmd_export(args) -> dict:
    from .evaluation import export_embeddings, load_networks

    _, config, _ = load_networks(args.checkpoint, args.network)
    if args.out is None:
        raise ConfigError("--out is required for export-embeddings")
    args.dataset = None
    path = export_embeddings(args.checkpoint, _dataset(args, config), args.split, args.out, args.features,
                             args.network)
    return {"embeddings": str(path)}


def cmd_sweep(args) -> dict:
    from .sweep import SweepSpec, parse_values, run_sweep

    config = _config(args)
    spec = SweepSpec(config, args.axis, parse_values(args.axis, args.values), args.budget_epochs)
    if args.out is None:
        raise ConfigError("--out is required for sweep")
    rows = run_sweep(spec, args.out, args.eval, args.parallel, {"epochs": args.linear_epochs})
    return {"rows": rows, "table": str(Path(args.out) / "sweep.csv")}


def cmd_plot(args) -> dict:
    from .plots import lr_schedule, plot
    from .sweep import read_table
    from .trainer import read_metrics

    out = args.out or "."
    if args.kind == "sweep_bar":
        if len(args.inputs) != 1:
            raise ConfigError("sweep_bar takes exactly one sweep CSV")
        png, csv_path = plot("sweep_bar", {}, out, read_table(args.inputs[0]))
    elif args.inputs:
        runs = {Path(p).parent.name or Path(p).stem: read_metrics(p) for p in args.inputs}
        png, csv_path = plot(args.kind, runs, out)
    elif args.kind == "lr_curve" and args.config and args.steps_per_epoch:
        config = _config(args)
        spe = args.steps_per_epoch
        records = [{"kind": "step", "step": r["step"], "epoch": r["step"] // spe, "lr": r["lr"]}
                   for r in lr_schedule(config, spe)]
        png, csv_path = plot("lr_curve", {"schedule": records}, out)
    else:
        raise ConfigError("plot needs metrics inputs (or --config with --steps-per-epoch for lr_curve)")
    return {"plot": str(png), "csv": str(csv_path)}


COMMANDS = {
    "ingest": cmd_ingest, "pretrain": cmd_pretrain, "linear-eval": cmd_linear_eval, "knn": cmd_knn,
    "export-embeddings": cmd_export, "sweep": cmd_sweep, "plot": cmd_plot,
}


def _fail(kind: str, exc: Exception, code: int) -> int:
    payload = {"error": kind, "message": str(exc)}
    path = getattr(exc, "path", None) or getattr(exc, "filename", None)
    if path:
        payload["path"] = str(path)
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        result = COMMANDS[args.command](args)
    except ConfigError as exc:
        return _fail("config", exc, 2)
    except IngestError as exc:
        return _fail("io", exc, 1)
    except (ResslError, OSError, RuntimeError) as exc:
        return _fail(type(exc).__name__, exc, 1)
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
