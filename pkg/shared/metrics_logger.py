"""
Simple JSONL logger for training and evaluation metrics.

One JSON object per line, no timestamps: two runs with the same seed on the
same platform produce byte-identical files.
"""
import json
import logging
from pathlib import Path
from typing import Any, Union

from pydantic import BaseModel


class MetricsLogger:
    """Appends metric records to a JSONL file."""

    def __init__(self, log_file: Union[str, Path]):
        self.log_file = Path(log_file)
        self.log_file.parent.mkdir(parents=True, exist_ok=True)
        self.logger = logging.getLogger(__name__)

    def log(self, entry: Union[BaseModel, dict[str, Any]]) -> None:
        """
        Append one record.

        Args:
            entry: Pydantic metrics model or plain dict
        """
        if isinstance(entry, BaseModel):
            entry = entry.model_dump(mode="json", exclude_none=True)

        try:
            with open(self.log_file, "a") as f:
                f.write(json.dumps(entry, sort_keys=True) + "\n")
        except OSError as e:
            self.logger.error(f"Failed to write metrics to {self.log_file}: {e}")
            raise

    def truncate_after(self, step: int) -> None:
        """
        Drop records written after ``step`` (used when resuming from a checkpoint).

        Step records with ``step > step`` and epoch records closed after it are
        removed; malformed lines are kept.
        """
        if not self.log_file.exists():
            return

        temp_file = self.log_file.with_suffix(".tmp")
        kept = 0
        removed = 0

        try:
            with open(self.log_file, "r") as infile, open(temp_file, "w") as outfile:
                for line in infile:
                    try:
                        entry = json.loads(line.strip())
                        if int(entry["step"]) > step:
                            removed += 1
                            continue
                    except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                        pass
                    outfile.write(line)
                    kept += 1

            temp_file.replace(self.log_file)

            if removed > 0:
                self.logger.info(f"Metrics truncated to step {step}: removed {removed} entries, kept {kept}")

        except OSError as e:
            self.logger.error(f"Failed to truncate metrics log: {e}")
            if temp_file.exists():
                temp_file.unlink()
            raise


def read_metrics(log_file: Union[str, Path]) -> list[dict[str, Any]]:
    """Parse a metrics JSONL file, skipping blank lines"""
    entries = []
    with open(log_file, "r") as f:
        for line in f:
            line = line.strip()
            if line:
                entries.append(json.loads(line))
    return entries
