"""
Tests for the metric stream - per-epoch JSON lines with crash recovery.
"""

import json
import math
import tempfile
from pathlib import Path

import pytest

from sgs.stream import MetricLog, read_metrics


class TestMetricLog:
    """Basic writing."""

    def test_records_are_json_lines(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "metrics.jsonl"
            with MetricLog(path) as metrics:
                metrics.append({"epoch": 0, "d_loss": 1.5})
                metrics.append({"epoch": 1, "d_loss": 1.25})
            lines = path.read_text().splitlines()
            assert [json.loads(line)["epoch"] for line in lines] == [0, 1]
            assert lines[0] == '{"d_loss": 1.5, "epoch": 0}'

    def test_records_visible_before_close(self):
        """Each append is on disk immediately."""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "metrics.jsonl"
            metrics = MetricLog(path)
            metrics.append({"epoch": 0})
            assert read_metrics(path) == [{"epoch": 0}]
            metrics.close()

    def test_non_finite_becomes_null(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "metrics.jsonl"
            with MetricLog(path) as metrics:
                metrics.append({"epoch": 0, "d_loss": math.nan, "g_loss": math.inf})
            assert read_metrics(path) == [{"epoch": 0, "d_loss": None, "g_loss": None}]

    def test_fresh_log_truncates(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "metrics.jsonl"
            path.write_text('{"epoch": 9}\n')
            with MetricLog(path) as metrics:
                metrics.append({"epoch": 0})
            assert read_metrics(path) == [{"epoch": 0}]

    def test_append_after_close(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            metrics = MetricLog(Path(tmpdir) / "metrics.jsonl")
            metrics.close()
            metrics.close()
            with pytest.raises(RuntimeError):
                metrics.append({"epoch": 0})

    def test_creates_parent_directory(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "run" / "nested" / "metrics.jsonl"
            with MetricLog(path) as metrics:
                metrics.append({"epoch": 0})
            assert path.exists()


class TestRecovery:
    """Resuming a log after a crash."""

    def test_read_ignores_torn_line(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "metrics.jsonl"
            path.write_text('{"epoch": 0}\n{"epoch": 1}\n{"epoch": 2, "d_lo')
            assert [r["epoch"] for r in read_metrics(path)] == [0, 1]

    def test_resume_cuts_torn_line(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "metrics.jsonl"
            path.write_text('{"epoch": 0}\n{"epoch": 1}\n{"epoch": 2, "d_lo')
            with MetricLog(path, resume_epoch=2) as metrics:
                assert metrics.records_written == 2
                metrics.append({"epoch": 2})
            assert [r["epoch"] for r in read_metrics(path)] == [0, 1, 2]

    def test_resume_drops_later_epochs(self):
        """Records from epochs the resumed run will redo are removed."""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "metrics.jsonl"
            path.write_text("".join(json.dumps({"epoch": e}) + "\n" for e in range(5)))
            with MetricLog(path, resume_epoch=3) as metrics:
                metrics.append({"epoch": 3})
            assert [r["epoch"] for r in read_metrics(path)] == [0, 1, 2, 3]

    def test_backup_kept_until_close(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "metrics.jsonl"
            original = '{"epoch": 0}\n{"epoch": 1, "d'
            path.write_text(original)
            backup = path.with_suffix(".jsonl.bak")
            metrics = MetricLog(path, resume_epoch=1)
            assert backup.read_text() == original
            metrics.close()
            assert not backup.exists()

    def test_resume_without_log_starts_fresh(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "metrics.jsonl"
            with MetricLog(path, resume_epoch=4) as metrics:
                metrics.append({"epoch": 4})
            assert read_metrics(path) == [{"epoch": 4}]
