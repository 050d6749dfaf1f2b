#!/usr/bin/env python3
"""
Embedding export for external visualization.

File layout (little-endian): header magic "RSSLEMB\\0", version u32,
count u32, dim u32; then ``count`` rows of id u32, label i32, dim float32.
Unlabeled records carry label -1.
"""
import logging
import struct
from pathlib import Path
from typing import Literal

import numpy as np
import torch

from augmentation.views import Normalization
from evaluation.features import extract_features
from ingest.manifest import open_split, resolve_normalization
from model.networks import forward_embed
from pipeline.checkpoint import load_checkpoint, restore_pair
from pipeline.error_handling import EvaluationError, ExportError
from shared.models import DatasetSpec


logger = logging.getLogger(__name__)

EMB_MAGIC = b"RSSLEMB\x00"
EMB_VERSION = 1
EMB_HEADER = struct.Struct("<8sIII")

FeatureKind = Literal["embedding", "backbone"]


def embedding_dtype(dim: int) -> np.dtype:
    return np.dtype([("id", "<u4"), ("label", "<i4"), ("vector", "<f4", (dim,))])


def write_embeddings(path: Path, ids: np.ndarray, labels: np.ndarray, vectors: np.ndarray) -> Path:
    """
    Write an embedding file atomically.

    Raises:
        ExportError: On any IO failure, naming the path
    """
    path = Path(path)
    count, dim = vectors.shape
    rows = np.empty(count, dtype=embedding_dtype(dim))
    rows["id"] = ids
    rows["label"] = labels
    rows["vector"] = vectors

    temp_path = path.with_suffix(path.suffix + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(temp_path, "wb") as f:
            f.write(EMB_HEADER.pack(EMB_MAGIC, EMB_VERSION, count, dim))
            rows.tofile(f)
        temp_path.replace(path)
    except OSError as e:
        raise ExportError(f"Failed to write embeddings to {path}: {e}") from e
    return path


def read_embeddings(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (ids, labels, vectors)"""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            magic, version, count, dim = EMB_HEADER.unpack(f.read(EMB_HEADER.size))
            if magic != EMB_MAGIC or version != EMB_VERSION:
                raise ExportError(f"{path}: not an embedding file (magic {magic!r}, version {version})")
            rows = np.fromfile(f, dtype=embedding_dtype(dim), count=count)
    except (OSError, struct.error) as e:
        raise ExportError(f"Failed to read embeddings from {path}: {e}") from e
    if len(rows) != count:
        raise ExportError(f"{path}: expected {count} rows, found {len(rows)}")
    return rows["id"].astype(np.int64), rows["label"].astype(np.int64), rows["vector"]


def export_embeddings(
    checkpoint: Path,
    dataset: DatasetSpec,
    out_path: Path,
    features: FeatureKind = "embedding",
    device: str = "cpu",
    batch_size: int = 256,
    num_workers: int = 0,
) -> Path:
    """
    Center-view features of every record of ``dataset.split``.

    Args:
        checkpoint: Pretraining checkpoint
        dataset: Dataset and split to export
        out_path: Destination embedding file
        features: Student projection output ("embedding") or pooled backbone features ("backbone")

    Raises:
        CheckpointError: Missing or unreadable checkpoint
        ExportError: IO failure writing the file
    """
    payload = load_checkpoint(checkpoint)
    experiment, pair = restore_pair(payload, device)
    if experiment.dataset.name != dataset.name:
        raise EvaluationError(f"{checkpoint} was trained on {experiment.dataset.name}, not {dataset.name}")

    model = pair.student
    model.eval()
    encoder = model.features if features == "backbone" else (lambda x: forward_embed(model, x))

    split = open_split(dataset)
    normalization = Normalization(*resolve_normalization(dataset))
    extracted = extract_features(encoder, split, dataset.train_side, normalization, batch_size, device, num_workers)

    write_embeddings(
        out_path,
        extracted.ids.numpy(),
        extracted.labels.numpy(),
        extracted.features.numpy().astype(np.float32),
    )
    logger.info(f"Exported {len(extracted.ids)} {features} vectors of {dataset.name}/{dataset.split} to {out_path}")
    return Path(out_path)
