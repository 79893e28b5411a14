"""
Run Artifacts
=============

On-disk layout of an experiment output directory with atomic writes and
crash recovery.

    <out>/
        config.ini              effective experiment config
        session.jsonl           structured log (see cli.setup_logging)
        events.jsonl            append-only run events (see events.py)
        metrics_seed<k>.csv     one IterationMetrics row per iteration
        selection_seed<k>.csv   selection log (iteration, snapshot, delta, action)
        snapshot_seed<k>.bin    final policy snapshot
        summary.json            final returns across seeds
"""

import csv
import json
import logging
import os
from pathlib import Path
from typing import Any, Optional, Sequence

logger = logging.getLogger(__name__)

TMP_SUFFIX = ".tmp"


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    """Write atomically (temp + fsync + rename).

    A crash mid-write leaves at most a stale ``.tmp`` file, never a torn
    target file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + TMP_SUFFIX)
    with open(tmp_path, "wb") as f:
        f.write(payload)
        f.flush()
        os.fsync(f.fileno())
    tmp_path.replace(path)
    logger.debug(f"Atomic write complete: {path}")


def atomic_write_json(path: Path, data: Any) -> None:
    atomic_write_bytes(path, (json.dumps(data, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


class CsvStream:
    """Append rows to a CSV file, header first, flushed after every row."""

    def __init__(self, path: Path, fieldnames: Sequence[str]):
        self.path = Path(path)
        self.fieldnames = list(fieldnames)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "w", newline="")
        self._writer = csv.DictWriter(self._file, fieldnames=self.fieldnames, lineterminator="\n")
        self._writer.writeheader()
        self._file.flush()

    def write(self, row: dict[str, Any]) -> None:
        self._writer.writerow({key: _csv_cell(row.get(key)) for key in self.fieldnames})
        self._file.flush()

    def close(self) -> None:
        if not self._file.closed:
            self._file.close()

    def __enter__(self) -> "CsvStream":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _csv_cell(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, float):
        if value != value:  # NaN
            return ""
        return repr(value)
    return value


def read_csv(path: Path) -> tuple[list[str], list[dict[str, str]]]:
    with open(path, "r", newline="") as f:
        reader = csv.DictReader(f)
        rows = list(reader)
        return list(reader.fieldnames or []), rows


class RunArtifacts:
    """Owns one experiment output directory."""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)

    def ensure_directories(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        logger.debug(f"Ensured output directory: {self.out_dir}")

    def recover_from_crash(self) -> list[Path]:
        """Delete leftover temp files from interrupted atomic writes."""
        removed = []
        if not self.out_dir.exists():
            return removed
        for tmp in sorted(self.out_dir.glob(f"*{TMP_SUFFIX}")):
            logger.warning(f"Found incomplete write: {tmp}")
            tmp.unlink()
            removed.append(tmp)
        return removed

    def prepare(self) -> None:
        self.ensure_directories()
        self.recover_from_crash()
        if not os.access(self.out_dir, os.W_OK):
            raise PermissionError(f"Output directory {self.out_dir} is not writable")

    def metrics_path(self, seed: int) -> Path:
        return self.out_dir / f"metrics_seed{seed}.csv"

    def selection_path(self, seed: int) -> Path:
        return self.out_dir / f"selection_seed{seed}.csv"

    def snapshot_path(self, seed: int) -> Path:
        return self.out_dir / f"snapshot_seed{seed}.bin"

    @property
    def summary_path(self) -> Path:
        return self.out_dir / "summary.json"

    @property
    def events_path(self) -> Path:
        return self.out_dir / "events.jsonl"

    @property
    def config_path(self) -> Path:
        return self.out_dir / "config.ini"

    def write_summary(self, summary: dict[str, Any]) -> None:
        atomic_write_json(self.summary_path, summary)
        logger.info(f"Summary written to {self.summary_path}")

    def load_summary(self) -> Optional[dict[str, Any]]:
        if not self.summary_path.exists():
            return None
        try:
            with open(self.summary_path, "r") as f:
                return json.load(f)
        except json.JSONDecodeError as e:
            logger.error(f"Summary file is corrupt: {e}")
            raise ValueError(f"Summary file {self.summary_path} is corrupt: {e}")

    def existing_metrics(self) -> list[Path]:
        return sorted(self.out_dir.glob("metrics_seed*.csv"))
