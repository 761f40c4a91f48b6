"""metrics.csv / summary.csv reading and writing."""

from __future__ import annotations

import csv
import io
import math

from .data import DataFormatError
from .metrics import METRIC_COLUMNS, MetricRow

METRICS_HEADER = "# sqvae-metrics v1"
SUMMARY_HEADER = "# sqvae-summary v1"


def format_rows(rows: list[MetricRow], with_header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if with_header:
        buf.write(METRICS_HEADER + "\n")
        w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


class MetricsWriter:
    """Appends rows to metrics.csv and flushes after each one."""

    def __init__(self, path, keep_until_step: int | None = None):
        self.path = path
        if keep_until_step is None:
            with open(path, "w", newline="") as fh:
                fh.write(format_rows([]))
        else:
            # resuming: drop rows written after the checkpoint
            rows = [r for r in read_metrics(path, allow_empty=True) if r.step <= keep_until_step]
            with open(path, "w", newline="") as fh:
                fh.write(format_rows(rows))

    def __call__(self, row: MetricRow) -> None:
        with open(self.path, "a", newline="") as fh:
            fh.write(format_rows([row], with_header=False))


def read_table(path) -> tuple[str | None, list[dict[str, str]], list[str]]:
    """Rows of a CSV with an optional leading ``#`` comment line."""
    with open(path, newline="") as fh:
        text = fh.read()
    lines = text.splitlines()
    comment = None
    if lines and lines[0].startswith("#"):
        comment = lines[0]
        lines = lines[1:]
    reader = csv.reader(lines)
    try:
        columns = next(reader)
    except StopIteration:
        return comment, [], []
    rows = []
    for i, cells in enumerate(reader, start=2):
        if len(cells) != len(columns):
            raise DataFormatError(f"{path}: line {i} has {len(cells)} cells, "
                                  f"expected {len(columns)}")
        rows.append(dict(zip(columns, cells)))
    return comment, rows, columns


def read_metrics(path, allow_empty: bool = False) -> list[MetricRow]:
    comment, rows, columns = read_table(path)
    if comment != METRICS_HEADER:
        raise DataFormatError(f"{path}: not a metrics file (header {comment!r})")
    if columns != METRIC_COLUMNS:
        raise DataFormatError(f"{path}: unexpected columns")
    if not rows and not allow_empty:
        raise DataFormatError(f"{path}: no data rows")
    return [MetricRow.from_cells(r) for r in rows]


def mean_std(values: list[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    n = len(values)
    mu = math.fsum(values) / n
    if n < 2:
        return mu, 0.0
    var = math.fsum((v - mu) ** 2 for v in values) / (n - 1)
    return mu, math.sqrt(var)
