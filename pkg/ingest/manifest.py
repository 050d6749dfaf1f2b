#!/usr/bin/env python3
"""
Ingest a dataset split into a packed file plus its JSON manifest,
and open already-ingested splits for reading.
"""
import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np

from ingest.client import ArchiveDownloader
from ingest.readers import RawSplit, read_split
from pipeline.error_handling import DataIterationError, IngestionError
from shared.models import DatasetSpec, Manifest
from shared.packed_store import UNLABELED, PackedSplit, write_packed_split


logger = logging.getLogger(__name__)


def channel_stats(images: np.ndarray, chunk_size: int = 4096) -> tuple[list[float], list[float]]:
    """Per-channel mean and std of uint8 images, in [0, 1] pixel units"""
    total = np.zeros(3, dtype=np.float64)
    total_sq = np.zeros(3, dtype=np.float64)
    pixels = 0
    for start in range(0, len(images), chunk_size):
        chunk = images[start:start + chunk_size].astype(np.float64) / 255.0
        total += chunk.sum(axis=(0, 1, 2))
        total_sq += np.square(chunk).sum(axis=(0, 1, 2))
        pixels += chunk.shape[0] * chunk.shape[1] * chunk.shape[2]
    mean = total / pixels
    std = np.sqrt(np.maximum(total_sq / pixels - np.square(mean), 0.0))
    return mean.tolist(), std.tolist()


def class_histogram(labels: np.ndarray, num_classes: int) -> dict[int, int]:
    """Counts of every class; unlabeled records are excluded"""
    labeled = labels[labels != UNLABELED]
    if len(labeled) and (labeled.min() < 0 or labeled.max() >= num_classes):
        raise IngestionError(f"labels outside [0, {num_classes}) found")
    counts = np.bincount(labeled, minlength=num_classes)
    return {int(c): int(n) for c, n in enumerate(counts)}


def write_manifest(manifest: Manifest, path: Path) -> None:
    path = Path(path)
    temp_path = path.with_suffix(path.suffix + ".tmp")
    with open(temp_path, "w") as f:
        json.dump(manifest.model_dump(mode="json"), f, indent=2, sort_keys=True)
    temp_path.replace(path)


def pack_split(spec: DatasetSpec, raw: RawSplit) -> Manifest:
    """
    Write a decoded split to its packed file and manifest.

    Args:
        spec: Dataset split the records belong to
        raw: Decoded records

    Returns:
        The written manifest
    """
    if raw.images.shape[1:3] != (spec.image_side, spec.image_side):
        raise IngestionError(
            f"{raw.source}: expected {spec.image_side}x{spec.image_side} images, got {raw.images.shape[1:3]}"
        )

    histogram = class_histogram(raw.labels, spec.num_classes)
    mean, std = channel_stats(raw.images)
    sha256 = write_packed_split(spec.packed_path, raw.ids, raw.labels, raw.images)

    manifest = Manifest(
        name=spec.name,
        split=spec.split,
        count=len(raw.ids),
        sha256=sha256,
        class_histogram=histogram,
        unlabeled_count=int(np.sum(raw.labels == UNLABELED)),
        image_side=spec.image_side,
        mean=mean,
        std=std,
        source=raw.source,
    )
    write_manifest(manifest, spec.manifest_path)
    logger.info(f"Packed {spec.name}/{spec.split}: {manifest.count} records -> {spec.packed_path}")
    return manifest


def ingest(
    spec: DatasetSpec,
    download: bool = True,
    downloader: Optional[ArchiveDownloader] = None,
) -> Manifest:
    """
    Decode a dataset split, check it against the canonical size and pack it.

    Args:
        spec: Dataset split to ingest
        download: Whether missing archives may be downloaded
        downloader: HTTP client for archives not handled by torchvision

    Returns:
        Manifest of the packed split

    Raises:
        IngestionError: Missing/corrupt archive or non-canonical record count
        ChecksumMismatchError: Archive present with a wrong checksum
    """
    logger.info(f"Ingesting {spec.name}/{spec.split} under {spec.dataset_dir}")
    raw = read_split(spec, download=download, downloader=downloader)

    if len(raw.ids) != spec.expected_count:
        raise IngestionError(
            f"{raw.source}: {spec.name}/{spec.split} has {len(raw.ids)} images, expected {spec.expected_count}"
        )

    return pack_split(spec, raw)


def load_manifest(spec: DatasetSpec) -> Manifest:
    """Read the manifest of an ingested split"""
    path = spec.manifest_path
    if not path.exists():
        raise DataIterationError(f"manifest not found: {path} (run ingest for {spec.name}/{spec.split} first)")
    try:
        with open(path, "r") as f:
            return Manifest.model_validate(json.load(f))
    except (json.JSONDecodeError, ValueError) as e:
        raise DataIterationError(f"{path}: unreadable manifest: {e}") from e


def open_split(spec: DatasetSpec, verify: bool = False) -> PackedSplit:
    """
    Open the packed file of an ingested split.

    Args:
        spec: Dataset split
        verify: Recompute the file hash and compare with the manifest
    """
    manifest = load_manifest(spec)
    split = PackedSplit(spec.packed_path, expected_sha256=manifest.sha256 if verify else None)
    if len(split) != manifest.count:
        raise DataIterationError(f"{spec.packed_path}: {len(split)} records but manifest says {manifest.count}")
    return split


def resolve_normalization(spec: DatasetSpec) -> tuple[list[float], list[float]]:
    """Channel mean/std of the dataset, taken from the train split when it is ingested"""
    train_spec = spec.with_split("train")
    source = train_spec if train_spec.manifest_path.exists() else spec
    manifest = load_manifest(source)
    return manifest.mean, manifest.std
