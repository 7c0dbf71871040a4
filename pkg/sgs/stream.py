"""
SGS Metric Stream - Append per-epoch records on the fly, one JSON object per line.

Solves the "training run dies at epoch 1500" problem.

Design:
    {"epoch": 0, "d_loss": 1.386, "g_loss": 0.693, ...}     <- written + fsynced
    {"epoch": 1, "d_loss": 1.201, "g_loss": 0.811, ...}        as each epoch ends
    {"epoch": 2, "d_lo                                      <- torn by a crash

  - Records hit the disk the moment they are ready
  - On resume the log is scanned, a torn last line is cut off (a .bak copy
    of the original bytes is kept until the writer closes cleanly) and
    records after the resumed epoch are dropped so the log replays exactly

Usage:
    with MetricLog("metrics.jsonl") as log:
        log.append({"epoch": 0, "d_loss": 1.38})

    # Resume after a crash, keeping records for epochs < 50:
    with MetricLog("metrics.jsonl", resume_epoch=50) as log:
        log.append({"epoch": 50, ...})
"""

from __future__ import annotations

import json
import logging
import math
import os
from pathlib import Path

from sgs.errors import DataError
from sgs.formats import MAX_FILE_SIZE

log = logging.getLogger(__name__)


class MetricLog:
    """Line-delimited JSON writer, flushed and fsynced per record."""

    def __init__(self, path: str | Path, resume_epoch: int | None = None) -> None:
        self.path = Path(path)
        self._closed = False
        self._backup_path: Path | None = None
        self._records = 0
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if resume_epoch is not None and self.path.exists():
            self._backup_path, self._records = _recover(self.path, resume_epoch)
            self._handle = open(self.path, "ab")
        else:
            fd = os.open(str(self.path), os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644)
            self._handle = os.fdopen(fd, "wb")

    def append(self, record: dict) -> None:
        """Write a record to disk immediately."""
        if self._closed:
            raise RuntimeError("Cannot append to a closed MetricLog")
        line = json.dumps(_finite(record), sort_keys=True, allow_nan=False)
        self._handle.write(line.encode("utf-8") + b"\n")
        self._handle.flush()
        os.fsync(self._handle.fileno())
        self._records += 1

    def close(self) -> None:
        if self._closed:
            return
        self._handle.close()
        self._closed = True
        if self._backup_path and self._backup_path.exists():
            self._backup_path.unlink()
            self._backup_path = None

    def __enter__(self) -> MetricLog:
        return self

    def __exit__(self, *args) -> None:
        self.close()

    @property
    def records_written(self) -> int:
        return self._records


def _finite(record: dict) -> dict:
    """Non-finite floats become null so every line stays strict JSON."""
    out = {}
    for key, value in record.items():
        if isinstance(value, float) and not math.isfinite(value):
            value = None
        out[key] = value
    return out


def read_metrics(path: str | Path) -> list[dict]:
    """Every complete record; a torn final line is ignored."""
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError:
            break
    return records


def _recover(path: Path, resume_epoch: int) -> tuple[Path, int]:
    """Truncate the log to the records of epochs before `resume_epoch`."""
    size = path.stat().st_size
    if size > MAX_FILE_SIZE:
        raise DataError(f"Metric log size {size} exceeds maximum {MAX_FILE_SIZE} bytes")
    raw = path.read_bytes()
    backup_path = path.with_suffix(path.suffix + ".bak")
    backup_path.write_bytes(raw)

    keep = 0
    kept = 0
    pos = 0
    for line in raw.split(b"\n"):
        end = pos + len(line) + 1
        if end > len(raw):
            break  # torn: no terminating newline
        try:
            record = json.loads(line)
        except json.JSONDecodeError:
            break
        if not isinstance(record, dict) or record.get("epoch", -1) >= resume_epoch:
            break
        keep = end
        kept += 1
        pos = end

    if keep < len(raw):
        log.info("metric log %s: dropping %d trailing bytes on resume", path, len(raw) - keep)
    with open(path, "r+b") as handle:
        handle.truncate(keep)
    return backup_path, kept
