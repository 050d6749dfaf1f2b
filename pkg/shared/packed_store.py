"""
Packed binary storage for decoded dataset splits.

A split is one file: a little-endian header (magic "RSSLDATA", version u32,
count u32, H u16, W u16) followed by fixed-size records (id u32, label i32,
raw HxWx3 uint8 pixels). Files are read through a read-only memory map, so
any number of data-loader workers can share one split.
"""
import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from pipeline.error_handling import ChecksumMismatchError, DataIterationError, IngestionError


MAGIC = b"RSSLDATA"
VERSION = 1
HEADER = struct.Struct("<8sIIHH")
UNLABELED = -1


def record_dtype(height: int, width: int) -> np.dtype:
    """Numpy layout of one packed record"""
    return np.dtype([("id", "<u4"), ("label", "<i4"), ("pixels", "u1", (height, width, 3))])


@dataclass(frozen=True)
class SampleRecord:
    """
    One decoded image.

    Attributes:
        image: HxWx3 uint8 pixels
        label: Class index, None for unlabeled images
        id: Stable integer id, unique within the split
    """
    image: np.ndarray
    label: Optional[int]
    id: int


@dataclass(frozen=True)
class SampleBatch:
    """A batch of records in iteration order"""
    ids: np.ndarray
    labels: np.ndarray
    images: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def file_sha256(path: Path, chunk_size: int = 1 << 20) -> str:
    """SHA-256 of a file, streamed"""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_packed_split(path: Path, ids: np.ndarray, labels: np.ndarray, images: np.ndarray) -> str:
    """
    Write a packed split atomically.

    Args:
        path: Destination file
        ids: (N,) record ids
        labels: (N,) class indices, -1 for unlabeled
        images: (N, H, W, 3) uint8 pixels

    Returns:
        SHA-256 of the written file
    """
    if images.ndim != 4 or images.shape[-1] != 3 or images.dtype != np.uint8:
        raise IngestionError(f"expected (N, H, W, 3) uint8 images, got {images.shape} {images.dtype}")
    count, height, width, _ = images.shape
    if len(ids) != count or len(labels) != count:
        raise IngestionError(f"ids/labels/images length mismatch: {len(ids)}/{len(labels)}/{count}")
    if len(np.unique(ids)) != count:
        raise IngestionError("record ids are not unique")

    records = np.empty(count, dtype=record_dtype(height, width))
    records["id"] = ids
    records["label"] = labels
    records["pixels"] = images

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_path = path.with_suffix(path.suffix + ".tmp")
    with open(temp_path, "wb") as f:
        f.write(HEADER.pack(MAGIC, VERSION, count, height, width))
        records.tofile(f)
    temp_path.replace(path)
    return file_sha256(path)


class PackedSplit:
    """
    Read-only view over a packed split file.

    Schema:
        header: magic, version, count, height, width
        records: id, label, pixels
    """

    def __init__(self, path: Path, expected_sha256: Optional[str] = None):
        """
        Open a packed split.

        Args:
            path: Packed split file
            expected_sha256: If given, the file hash must match
        """
        self.path = Path(path)
        self.logger = logging.getLogger(__name__)

        if not self.path.exists():
            raise DataIterationError(f"packed split not found: {self.path}")
        if expected_sha256 is not None:
            actual = file_sha256(self.path)
            if actual != expected_sha256:
                raise ChecksumMismatchError(f"{self.path}: sha256 {actual} does not match manifest {expected_sha256}")

        with open(self.path, "rb") as f:
            raw = f.read(HEADER.size)
        if len(raw) != HEADER.size:
            raise DataIterationError(f"{self.path}: truncated header")
        magic, version, count, height, width = HEADER.unpack(raw)
        if magic != MAGIC:
            raise DataIterationError(f"{self.path}: bad magic {magic!r}")
        if version != VERSION:
            raise DataIterationError(f"{self.path}: unsupported version {version}")

        self.count = count
        self.height = height
        self.width = width
        self._records = np.memmap(
            self.path, dtype=record_dtype(height, width), mode="r", offset=HEADER.size, shape=(count,)
        )
        self.logger.debug(f"Opened {self.path} with {count} records of {height}x{width}")

    def __len__(self) -> int:
        return self.count

    @property
    def ids(self) -> np.ndarray:
        return np.asarray(self._records["id"], dtype=np.int64)

    @property
    def labels(self) -> np.ndarray:
        return np.asarray(self._records["label"], dtype=np.int64)

    def record(self, index: int) -> SampleRecord:
        row = self._records[index]
        label = int(row["label"])
        return SampleRecord(
            image=np.array(row["pixels"]),
            label=None if label == UNLABELED else label,
            id=int(row["id"]),
        )

    def batch(self, indices: np.ndarray) -> SampleBatch:
        rows = self._records[np.asarray(indices)]
        return SampleBatch(
            ids=np.asarray(rows["id"], dtype=np.int64),
            labels=np.asarray(rows["label"], dtype=np.int64),
            images=np.array(rows["pixels"]),
        )
