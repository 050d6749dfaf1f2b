#!/usr/bin/env python3
"""
Decode benchmark dataset archives into in-memory arrays.

CIFAR-10/100 and STL-10 archives are fetched and md5-checked through the
torchvision dataset classes; Tiny ImageNet is fetched with ArchiveDownloader
and its validation labels are parsed from val_annotations.txt.
"""
import io
import logging
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from torchvision import datasets
from torchvision.datasets.utils import check_integrity

from ingest.client import ArchiveDownloader
from pipeline.error_handling import ChecksumMismatchError, IngestionError
from shared.models import DatasetSpec
from shared.packed_store import UNLABELED


logger = logging.getLogger(__name__)

TINY_IMAGENET_URL = "http://cs231n.stanford.edu/tiny-imagenet-200.zip"
TINY_IMAGENET_MD5 = "90528d7ca1a48142e341f4ef8d21d0de"

STL10_SPLITS = {
    "train": "train",
    "train_unlabeled_plus_labeled": "train+unlabeled",
    "test": "test",
}


@dataclass
class RawSplit:
    """Decoded split before packing"""
    ids: np.ndarray
    labels: np.ndarray
    images: np.ndarray
    source: str


def _raw_dir(spec: DatasetSpec) -> Path:
    return spec.dataset_dir / "raw"


def _refuse_corrupt_archive(archive: Path, md5: str) -> None:
    """A present archive with the wrong checksum is never overwritten"""
    if archive.exists() and not check_integrity(str(archive), md5):
        raise ChecksumMismatchError(f"{archive}: checksum does not match the expected md5 {md5}")


def read_cifar(spec: DatasetSpec, download: bool = True) -> RawSplit:
    """CIFAR-10/100 python pickles"""
    dataset_class = datasets.CIFAR10 if spec.name == "cifar10" else datasets.CIFAR100
    raw_dir = _raw_dir(spec)
    archive = raw_dir / dataset_class.filename
    _refuse_corrupt_archive(archive, dataset_class.tgz_md5)

    try:
        dataset = dataset_class(root=str(raw_dir), train=spec.split == "train", download=download)
    except RuntimeError as e:
        raise IngestionError(f"{archive}: {e}") from e

    images = np.ascontiguousarray(dataset.data, dtype=np.uint8)
    labels = np.asarray(dataset.targets, dtype=np.int64)
    return RawSplit(ids=np.arange(len(images)), labels=labels, images=images, source=archive.name)


def read_stl10(spec: DatasetSpec, download: bool = True) -> RawSplit:
    """STL-10 binary files, kept at the source 96x96 resolution"""
    raw_dir = _raw_dir(spec)
    archive = raw_dir / datasets.STL10.filename
    _refuse_corrupt_archive(archive, datasets.STL10.tgz_md5)

    try:
        dataset = datasets.STL10(root=str(raw_dir), split=STL10_SPLITS[spec.split], download=download)
    except RuntimeError as e:
        raise IngestionError(f"{archive}: {e}") from e

    # stored channel-first on disk
    images = np.ascontiguousarray(np.transpose(dataset.data, (0, 2, 3, 1)), dtype=np.uint8)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    labels[labels < 0] = UNLABELED
    return RawSplit(ids=np.arange(len(images)), labels=labels, images=images, source=archive.name)


def _decode_rgb(data: bytes, name: str) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except Exception as e:
        raise IngestionError(f"Failed to decode image {name}: {e}") from e


def read_tiny_imagenet(
    spec: DatasetSpec,
    download: bool = True,
    downloader: Optional[ArchiveDownloader] = None,
) -> RawSplit:
    """Tiny ImageNet zip; the test split is the 10k labeled validation set"""
    archive = _raw_dir(spec) / "tiny-imagenet-200.zip"
    if not archive.exists() and not download:
        raise IngestionError(f"{archive}: archive not found and download disabled")
    if download or archive.exists():
        (downloader or ArchiveDownloader()).download(TINY_IMAGENET_URL, archive, md5=TINY_IMAGENET_MD5)

    try:
        with zipfile.ZipFile(archive) as zf:
            return parse_tiny_imagenet(zf, spec.split, archive.name)
    except zipfile.BadZipFile as e:
        raise IngestionError(f"{archive}: corrupt zip archive: {e}") from e


def parse_tiny_imagenet(zf: zipfile.ZipFile, split: str, source: str = "") -> RawSplit:
    """Decode one split from an opened Tiny ImageNet zip"""
    prefix = "tiny-imagenet-200/"
    try:
        wnids = sorted(zf.read(prefix + "wnids.txt").decode("utf-8").split())
    except KeyError as e:
        raise IngestionError(f"{source}: wnids.txt missing from archive") from e
    class_index = {wnid: i for i, wnid in enumerate(wnids)}

    entries: list[tuple[str, int]] = []
    if split == "train":
        for name in sorted(zf.namelist()):
            parts = name.split("/")
            # tiny-imagenet-200/train/<wnid>/images/<file>.JPEG
            if len(parts) == 5 and parts[1] == "train" and parts[3] == "images" and parts[4].endswith(".JPEG"):
                entries.append((name, class_index[parts[2]]))
    elif split == "test":
        try:
            annotations = zf.read(prefix + "val/val_annotations.txt").decode("utf-8")
        except KeyError as e:
            raise IngestionError(f"{source}: val/val_annotations.txt missing from archive") from e
        for line in sorted(annotations.splitlines()):
            fields = line.split("\t")
            if len(fields) < 2:
                continue
            entries.append((prefix + "val/images/" + fields[0], class_index[fields[1]]))
    else:
        raise IngestionError(f"tiny_imagenet has no split '{split}'")

    if not entries:
        raise IngestionError(f"{source}: no images found for split '{split}'")

    images = np.stack([_decode_rgb(zf.read(name), name) for name, _ in entries])
    labels = np.asarray([label for _, label in entries], dtype=np.int64)
    logger.info(f"Decoded {len(images)} Tiny ImageNet images ({split})")
    return RawSplit(ids=np.arange(len(images)), labels=labels, images=images, source=source)


def read_split(spec: DatasetSpec, download: bool = True, downloader: Optional[ArchiveDownloader] = None) -> RawSplit:
    """Dispatch on dataset name"""
    if spec.name in ("cifar10", "cifar100"):
        return read_cifar(spec, download)
    if spec.name == "stl10":
        return read_stl10(spec, download)
    return read_tiny_imagenet(spec, download, downloader)
