#!/usr/bin/env python3
"""
HTTP client for dataset archives.
Streams downloads to disk and verifies the archive checksum before use.
"""
import logging
from pathlib import Path
from typing import Optional

import requests
from torchvision.datasets.utils import check_integrity

from pipeline.error_handling import (
    ChecksumMismatchError,
    IngestionError,
    RetryStrategy,
    retry_with_backoff,
)


class ArchiveDownloader:
    """Downloads dataset archives with retry and md5 verification"""

    CHUNK_SIZE = 1 << 20

    def __init__(
        self,
        max_retries: int = 3,
        retry_delay_seconds: float = 2.0,
        timeout_seconds: float = 60.0,
        session: Optional[requests.Session] = None,
    ):
        """
        Initialize downloader

        Args:
            max_retries: Retries per archive on network errors
            retry_delay_seconds: Base delay of the exponential backoff
            timeout_seconds: Per-request socket timeout
            session: Optional pre-configured requests session
        """
        self.max_retries = max_retries
        self.retry_delay_seconds = retry_delay_seconds
        self.timeout_seconds = timeout_seconds
        self.session = session or requests.Session()
        self.logger = logging.getLogger(__name__)

    def _fetch(self, url: str, destination: Path) -> None:
        """Stream one URL to a temporary file, then move it into place"""
        self.logger.info(f"GET {url}")
        temp_path = destination.with_suffix(destination.suffix + ".part")

        with self.session.get(url, stream=True, timeout=self.timeout_seconds) as response:
            response.raise_for_status()
            with open(temp_path, "wb") as f:
                for chunk in response.iter_content(chunk_size=self.CHUNK_SIZE):
                    if chunk:
                        f.write(chunk)

        temp_path.replace(destination)

    def download(self, url: str, destination: Path, md5: Optional[str] = None) -> Path:
        """
        Ensure ``destination`` holds the archive behind ``url``.

        An existing file is reused when its checksum matches; an existing file
        with a wrong checksum is refused rather than silently replaced.

        Args:
            url: Archive URL
            destination: Local archive path
            md5: Expected md5 hex digest

        Returns:
            Path to the verified archive

        Raises:
            ChecksumMismatchError: If the archive does not match ``md5``
            IngestionError: If the download fails after all retries
        """
        destination = Path(destination)
        destination.parent.mkdir(parents=True, exist_ok=True)

        if destination.exists():
            if check_integrity(str(destination), md5):
                self.logger.info(f"Using cached archive {destination}")
                return destination
            raise ChecksumMismatchError(
                f"{destination}: checksum does not match the expected md5 {md5}; delete the file to re-download"
            )

        fetch = retry_with_backoff(
            max_retries=self.max_retries,
            strategy=RetryStrategy.EXPONENTIAL,
            base_delay=self.retry_delay_seconds,
            exceptions=(requests.RequestException,),
            logger=self.logger,
        )(self._fetch)

        try:
            fetch(url, destination)
        except requests.RequestException as e:
            raise IngestionError(f"Failed to download {url} to {destination}: {e}") from e

        if not check_integrity(str(destination), md5):
            raise ChecksumMismatchError(f"{destination}: downloaded archive does not match md5 {md5}")

        self.logger.info(f"Downloaded {destination}")
        return destination
