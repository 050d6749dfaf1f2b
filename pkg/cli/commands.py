#!/usr/bin/env python3
"""
Command implementations behind main.py.

Every command takes the parsed arguments plus the loaded configuration and
returns a JSON-able summary; main.py prints it and maps failures to exit codes.
"""
import json
import logging
import sys
from argparse import Namespace
from pathlib import Path
from typing import Any, Callable, Optional

from pydantic import ValidationError

from cli.plots import emit_plot
from cli.sweep import run_sweep
from evaluation.export import export_embeddings
from evaluation.knn import knn_eval
from evaluation.linear import linear_eval
from ingest.client import ArchiveDownloader
from ingest.manifest import ingest
from pipeline.checkpoint import CheckpointManager
from pipeline.error_handling import CheckpointError, ConfigurationError
from pipeline.trainer import Trainer, resolve_device
from shared.config import Config, load_config
from shared.models import SweepSpec


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

# Flag name -> (config section path, field)
EXPERIMENT_FLAGS: dict[str, tuple[str, ...]] = {
    "epochs": ("epochs",),
    "batch_size": ("batch_size",),
    "tau_t": ("temps", "tau_t"),
    "tau_s": ("temps", "tau_s"),
    "queue_capacity": ("queue_capacity",),
    "momentum": ("ema_momentum",),
    "objective": ("objective",),
    "bn_groups": ("bn_groups",),
    "multicrop_sides": ("multicrop_sides",),
    "lr": ("base_lr",),
    "teacher_augmentation": ("teacher_augmentation",),
}


def _set_path(target: dict, path: tuple[str, ...], value: Any) -> None:
    for key in path[:-1]:
        target = target.setdefault(key, {})
    target[path[-1]] = value


def build_overrides(args: Namespace) -> dict[str, Any]:
    """Nested config overrides for every flag that was given on the command line"""
    overrides: dict[str, Any] = {}
    for flag, path in EXPERIMENT_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            _set_path(overrides, ("experiment",) + path, value)

    if getattr(args, "dataset", None) is not None:
        _set_path(overrides, ("experiment", "dataset", "name"), args.dataset)
    if getattr(args, "seed", None) is not None:
        _set_path(overrides, ("experiment", "seed"), args.seed)
        _set_path(overrides, ("linear_eval", "seed"), args.seed)
    if getattr(args, "k", None) is not None:
        _set_path(overrides, ("knn", "k"), args.k)
    if getattr(args, "temperature", None) is not None:
        _set_path(overrides, ("knn", "temperature"), args.temperature)
    return overrides


def load_command_config(args: Namespace) -> Config:
    return load_config(args.config, env_file=getattr(args, "env_file", None), overrides=build_overrides(args))


def default_run_dir(config: Config) -> Path:
    experiment = config.experiment
    return Path(config.app.runs_directory) / f"{experiment.dataset.name}-{experiment.objective}-{experiment.config_hash()}"


def output_dir(args: Namespace, config: Config) -> Path:
    return Path(args.out) if args.out else default_run_dir(config)


def require_checkpoint(args: Namespace) -> Path:
    """A checkpoint file, or the newest checkpoint of a run directory"""
    if not args.checkpoint:
        raise ConfigurationError("--checkpoint is required")
    path = Path(args.checkpoint)
    if path.is_dir():
        found = latest_checkpoint(path)
        if found is None:
            raise CheckpointError(f"No checkpoint under run directory {path}")
        return found
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    return path


def cmd_ingest(args: Namespace, config: Config) -> dict[str, Any]:
    dataset = config.experiment.dataset
    if args.split:
        splits = [args.split]
    elif dataset.name == "stl10":
        splits = ["train", "train_unlabeled_plus_labeled", "test"]
    else:
        splits = ["train", "test"]

    downloader = ArchiveDownloader(
        max_retries=config.app.download_retries,
        retry_delay_seconds=config.app.retry_delay_seconds,
    )
    manifests = {}
    for split in splits:
        manifest = ingest(dataset.with_split(split), download=not args.no_download, downloader=downloader)
        manifests[split] = {"count": manifest.count, "sha256": manifest.sha256}
    return {"dataset": dataset.name, "splits": manifests}


def cmd_pretrain(args: Namespace, config: Config) -> dict[str, Any]:
    run_dir = output_dir(args, config)
    experiment = config.experiment
    if experiment.dataset.name == "stl10" and experiment.dataset.split == "train":
        logger.warning("Pretraining STL-10 on the 5K labeled split; the 105K unlabeled+labeled split is the usual choice")

    result = Trainer(
        experiment,
        run_dir,
        device=config.app.device,
        num_workers=config.app.num_workers,
        progress_bars=config.app.progress_bars,
    ).train(resume=args.resume)
    return {
        "run_dir": str(run_dir),
        "config_hash": experiment.config_hash(),
        "final_checkpoint": str(result.final_checkpoint),
        "metrics": str(result.metrics_file),
        "best_knn_top1": result.best_knn_top1,
        "collapse_warnings": result.collapse_warnings,
    }


def cmd_linear_eval(args: Namespace, config: Config) -> dict[str, Any]:
    checkpoint = require_checkpoint(args)
    out_dir = Path(args.out) if args.out else checkpoint.parent.parent
    report = linear_eval(
        checkpoint,
        config.experiment.dataset,
        config.linear_eval,
        device=resolve_device(config.app.device),
        out_dir=out_dir,
        num_workers=config.app.num_workers,
        progress=config.app.progress_bars,
    )
    summary = report.model_dump(mode="json")
    summary.pop("per_class_accuracy")
    summary["report"] = str(out_dir / "linear_eval.json")
    return summary


def cmd_knn(args: Namespace, config: Config) -> dict[str, Any]:
    checkpoint = require_checkpoint(args)
    top1 = knn_eval(
        checkpoint,
        config.experiment.dataset,
        k=config.knn.k,
        temperature=config.knn.temperature,
        device=resolve_device(config.app.device),
        num_workers=config.app.num_workers,
        use_teacher=args.teacher,
    )
    return {"checkpoint": str(checkpoint), "dataset": config.experiment.dataset.name,
            "k": config.knn.k, "temperature": config.knn.temperature, "top1": top1}


def cmd_export(args: Namespace, config: Config) -> dict[str, Any]:
    checkpoint = require_checkpoint(args)
    dataset = config.experiment.dataset.with_split(args.split)
    out_path = Path(args.out) if args.out else checkpoint.parent.parent / f"embeddings_{args.split}_{args.features}.bin"
    export_embeddings(
        checkpoint,
        dataset,
        out_path,
        features=args.features,
        device=resolve_device(config.app.device),
        num_workers=config.app.num_workers,
    )
    return {"embeddings": str(out_path), "split": args.split, "features": args.features}


def cmd_sweep(args: Namespace, config: Config) -> dict[str, Any]:
    if not args.axis or not args.values:
        raise ConfigurationError("sweep needs --axis and --values")
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    budget = args.budget_epochs if args.budget_epochs is not None else config.sweep.budget_epochs
    try:
        spec = SweepSpec(
            base=config.experiment,
            axis=args.axis,
            values=values,
            budget_epochs=budget,
            eval=args.eval or config.sweep.eval,
        )
        spec.derived_configs()
    except (ValidationError, ValueError) as e:
        raise ConfigurationError(f"Invalid sweep: {e}") from e

    out_dir = Path(args.out) if args.out else Path(config.app.runs_directory) / f"sweep-{args.axis}"
    parallel = args.parallel if args.parallel is not None else config.sweep.parallel
    table = run_sweep(spec, out_dir, config.app, config.linear_eval, config.knn, parallel=parallel)
    return {
        "sweep_dir": str(out_dir),
        "table": str(out_dir / "sweep.csv"),
        "rows": json.loads(table.to_json(orient="records")),
    }


def cmd_plot(args: Namespace, config: Config) -> dict[str, Any]:
    inputs = [Path(p) for p in args.inputs]
    out_dir = Path(args.out) if args.out else Path(config.app.runs_directory) / "plots"
    png_path, csv_path = emit_plot(args.kind, inputs, out_dir, config=config.experiment)
    return {"kind": args.kind, "png": str(png_path), "csv": str(csv_path)}


COMMANDS: dict[str, Callable[[Namespace, Config], dict[str, Any]]] = {
    "ingest": cmd_ingest,
    "pretrain": cmd_pretrain,
    "linear-eval": cmd_linear_eval,
    "knn": cmd_knn,
    "export-embeddings": cmd_export,
    "sweep": cmd_sweep,
    "plot": cmd_plot,
}


def write_error(error: BaseException, command: Optional[str]) -> None:
    """One machine-readable error line on stderr"""
    payload = {"error": type(error).__name__, "message": str(error), "command": command}
    print(json.dumps(payload), file=sys.stderr)


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, ConfigurationError):
        return EXIT_USAGE
    return EXIT_FAILURE


def run_command(args: Namespace, config: Optional[Config] = None) -> int:
    """
    Load the config, run ``args.command`` and print its JSON summary.

    Returns:
        Process exit code
    """
    try:
        if config is None:
            config = load_command_config(args)
        summary = COMMANDS[args.command](args, config)
    except KeyboardInterrupt as e:
        logger.warning(f"{args.command} interrupted")
        write_error(e, args.command)
        return EXIT_FAILURE
    except Exception as e:
        logger.error(f"{args.command} failed: {e}", exc_info=not isinstance(e, ConfigurationError))
        write_error(e, args.command)
        return exit_code_for(e)

    print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    return EXIT_OK


def latest_checkpoint(run_dir: Path) -> Optional[Path]:
    """final.pt when the run finished, else the latest resumable checkpoint"""
    manager = CheckpointManager(Path(run_dir) / "checkpoints")
    if manager.final_path.exists():
        return manager.final_path
    return manager.latest_resumable()
