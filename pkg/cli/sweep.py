#!/usr/bin/env python3
"""
One-axis grid sweeps: pretrain every derived config, evaluate it, tabulate top-1.

Each row lives in its own run directory. A row whose result file exists is
not run again, and an interrupted row resumes from its latest checkpoint.
"""
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import pandas as pd

from evaluation.knn import knn_eval
from evaluation.linear import linear_eval
from pipeline.checkpoint import CheckpointManager
from pipeline.trainer import Trainer, resolve_device
from shared.config import AppConfig, KnnConfig
from shared.models import ExperimentConfig, LinearEvalConfig, SweepSpec


logger = logging.getLogger(__name__)

RESULT_FILE = "sweep_result.json"


@dataclass
class SweepRow:
    """Outcome of one sweep value"""
    value: Union[float, int, str]
    config_hash: str
    top1: Optional[float]
    status: str
    run_dir: str
    error: str = ""


@dataclass
class RowJob:
    value: Union[float, int, str]
    config: ExperimentConfig
    run_dir: Path
    eval_kind: str
    app: AppConfig
    linear: LinearEvalConfig
    knn: KnnConfig


def row_dir(out_dir: Path, axis: str, value: Union[float, int, str]) -> Path:
    return Path(out_dir) / f"{axis}={value}"


def run_row(job: RowJob) -> SweepRow:
    """Pretrain and evaluate one derived config; failures are recorded, not raised"""
    result_path = job.run_dir / RESULT_FILE
    if result_path.exists():
        with open(result_path, "r") as f:
            cached = SweepRow(**json.load(f))
        logger.info(f"Sweep row {job.value}: reusing {result_path}")
        return cached

    config_hash = job.config.config_hash()
    try:
        checkpoints = CheckpointManager(job.run_dir / "checkpoints", keep=job.config.keep_checkpoints)
        if not checkpoints.final_path.exists():
            resume = checkpoints.latest_resumable() is not None
            Trainer(
                job.config,
                job.run_dir,
                device=job.app.device,
                num_workers=job.app.num_workers,
                progress_bars=job.app.progress_bars,
            ).train(resume=resume)

        if job.eval_kind == "linear":
            report = linear_eval(checkpoints.final_path, job.config.dataset, job.linear,
                                 device=resolve_device(job.app.device), out_dir=job.run_dir,
                                 num_workers=job.app.num_workers)
            top1 = report.top1
        else:
            top1 = knn_eval(checkpoints.final_path, job.config.dataset, job.knn.k, job.knn.temperature,
                            device=resolve_device(job.app.device), num_workers=job.app.num_workers)
        row = SweepRow(job.value, config_hash, top1, "ok", str(job.run_dir))
    except Exception as e:
        logger.error(f"Sweep row {job.value} failed: {e}", exc_info=True)
        return SweepRow(job.value, config_hash, None, "failed", str(job.run_dir), f"{type(e).__name__}: {e}")

    with open(result_path, "w") as f:
        json.dump(asdict(row), f, indent=2, sort_keys=True)
    return row


def sweep_table(rows: list[SweepRow], axis: str) -> pd.DataFrame:
    """Rows in sweep order, with the config hash of each row"""
    frame = pd.DataFrame([asdict(r) for r in rows])
    frame = frame.rename(columns={"value": axis})
    return frame[[axis, "top1", "status", "config_hash", "run_dir", "error"]]


def run_sweep(
    spec: SweepSpec,
    out_dir: Path,
    app: AppConfig,
    linear: LinearEvalConfig,
    knn: KnnConfig,
    parallel: int = 1,
) -> pd.DataFrame:
    """
    Run every value of the sweep axis and write sweep.csv plus a text table.

    Args:
        spec: Base config, axis and values
        out_dir: Sweep directory; each row gets its own subdirectory
        app: Device and loader settings
        linear: Linear evaluation protocol (when spec.eval == "linear")
        knn: kNN settings (when spec.eval == "knn")
        parallel: Number of rows run at once in separate processes

    Returns:
        The result table ordered by axis value
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [
        RowJob(value, config, row_dir(out_dir, spec.axis, value), spec.eval, app, linear, knn)
        for value, config in spec.derived_configs()
    ]
    logger.info(f"Sweep over {spec.axis}: {[job.value for job in jobs]} ({spec.eval} evaluation, parallel={parallel})")

    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            rows = list(pool.map(run_row, jobs))
    else:
        rows = [run_row(job) for job in jobs]

    table = sweep_table(rows, spec.axis)
    table.to_csv(out_dir / "sweep.csv", index=False)
    with open(out_dir / "sweep.txt", "w") as f:
        f.write(table.drop(columns=["run_dir", "error"]).to_string(index=False) + "\n")

    failed = [r.value for r in rows if r.status != "ok"]
    if failed:
        logger.warning(f"Sweep rows failed: {failed}")
    return table
