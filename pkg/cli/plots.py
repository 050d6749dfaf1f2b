#!/usr/bin/env python3
"""
Plot emission from metrics logs and sweep tables.

Every plot is written as a PNG together with the CSV of the plotted data.
"""
import logging
from pathlib import Path
from typing import Literal, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from pipeline.error_handling import PlotError  # noqa: E402
from pipeline.schedules import lr_curve  # noqa: E402
from shared.metrics_logger import read_metrics  # noqa: E402
from shared.models import ExperimentConfig  # noqa: E402


logger = logging.getLogger(__name__)

PlotKind = Literal["lr_curve", "loss_curve", "entropy_curve", "sweep_bar"]
PLOT_KINDS = ("lr_curve", "loss_curve", "entropy_curve", "sweep_bar")

# Strip the matplotlib version from PNG metadata so output is reproducible
PNG_METADATA = {"Software": None}


def _run_label(path: Path) -> str:
    return path.parent.name or path.stem


def step_frame(inputs: list[Path], column: str) -> pd.DataFrame:
    """Step records of every metrics file, one ``run`` label per file"""
    frames = []
    for path in inputs:
        path = Path(path)
        if not path.exists():
            raise PlotError(f"metrics file not found: {path}")
        frame = pd.DataFrame(read_metrics(path))
        if frame.empty or "kind" not in frame or column not in frame:
            continue
        frame = frame[(frame["kind"] == "step") & frame[column].notna()][["step", "epoch", column]]
        frame.insert(0, "run", _run_label(path))
        frames.append(frame)
    if not frames or all(f.empty for f in frames):
        raise PlotError(f"no '{column}' step records in {[str(p) for p in inputs]}")
    return pd.concat(frames, ignore_index=True)


def schedule_frame(config: ExperimentConfig, steps_per_epoch: Optional[int] = None) -> pd.DataFrame:
    """Learning rate of every step of a config, without running it"""
    per_epoch = steps_per_epoch if steps_per_epoch is not None else config.steps_per_epoch()
    rates = lr_curve(config, per_epoch)
    return pd.DataFrame({
        "run": "schedule",
        "step": range(len(rates)),
        "epoch": [s / per_epoch for s in range(len(rates))],
        "lr": rates,
    })


def sweep_frame(inputs: list[Path]) -> pd.DataFrame:
    frames = []
    for path in inputs:
        path = Path(path)
        if not path.exists():
            raise PlotError(f"sweep table not found: {path}")
        frames.append(pd.read_csv(path))
    if not frames or all(f.empty for f in frames):
        raise PlotError("no sweep rows to plot")
    return pd.concat(frames, ignore_index=True)


def _line_plot(frame: pd.DataFrame, x: str, y: str, title: str, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    for run, group in frame.groupby("run", sort=True):
        ax.plot(group[x], group[y], label=str(run), linewidth=1.0)
    ax.set_xlabel(x)
    ax.set_ylabel(y)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    if frame["run"].nunique() > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=PNG_METADATA)
    plt.close(fig)


def _bar_plot(frame: pd.DataFrame, path: Path) -> None:
    axis = frame.columns[0]
    fig, ax = plt.subplots(figsize=(7, 4))
    labels = [str(v) for v in frame[axis]]
    ax.bar(labels, frame["top1"].fillna(0.0))
    ax.set_xlabel(axis)
    ax.set_ylabel("top-1 (%)")
    ax.set_title(f"top-1 by {axis}")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=PNG_METADATA)
    plt.close(fig)


def emit_plot(
    kind: PlotKind,
    inputs: list[Path],
    out_dir: Path,
    config: Optional[ExperimentConfig] = None,
) -> tuple[Path, Path]:
    """
    Write ``<kind>.png`` and ``<kind>.csv`` into ``out_dir``.

    ``lr_curve`` without inputs plots the schedule of ``config``.

    Raises:
        PlotError: Missing or empty inputs
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    png_path = out_dir / f"{kind}.png"
    csv_path = out_dir / f"{kind}.csv"

    if kind == "lr_curve":
        if inputs:
            frame = step_frame(inputs, "lr")
        elif config is not None:
            frame = schedule_frame(config)
        else:
            raise PlotError("lr_curve needs metrics files or a config")
        _line_plot(frame, "epoch", "lr", "learning rate", png_path)
    elif kind == "loss_curve":
        frame = step_frame(inputs, "loss")
        _line_plot(frame, "step", "loss", "training loss", png_path)
    elif kind == "entropy_curve":
        frame = step_frame(inputs, "teacher_entropy")
        _line_plot(frame, "step", "teacher_entropy", "teacher relation entropy", png_path)
    elif kind == "sweep_bar":
        frame = sweep_frame(inputs)
        _bar_plot(frame, png_path)
    else:
        raise PlotError(f"unknown plot kind '{kind}'")

    frame.to_csv(csv_path, index=False)
    logger.info(f"Wrote {png_path} and {csv_path} ({len(frame)} rows)")
    return png_path, csv_path
